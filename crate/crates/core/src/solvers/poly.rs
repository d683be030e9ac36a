//! Dense polynomials in three variables with every exponent at most 3,
//! enough for the cubic matrix constraints expanded by the solvers.

use std::ops::{Add, Mul, Sub};

const N: usize = 4;
const LEN: usize = N * N * N;

#[inline]
const fn idx(i: usize, j: usize, k: usize) -> usize {
    (i * N + j) * N + k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Poly {
    c: [f64; LEN],
}

impl Default for Poly {
    fn default() -> Self {
        Self::zero()
    }
}

impl Poly {
    pub fn zero() -> Self {
        Self { c: [0.0; LEN] }
    }

    /// `a x + b y + c z + d`.
    pub fn linear(a: f64, b: f64, c: f64, d: f64) -> Self {
        let mut p = Self::zero();
        p.c[idx(1, 0, 0)] = a;
        p.c[idx(0, 1, 0)] = b;
        p.c[idx(0, 0, 1)] = c;
        p.c[idx(0, 0, 0)] = d;
        p
    }

    pub fn coeff(&self, i: usize, j: usize, k: usize) -> f64 {
        self.c[idx(i, j, k)]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = *self;
        out.c.iter_mut().for_each(|x| *x *= s);
        out
    }

    /// Multiplies by the variable `z`.
    pub fn shift_z(&self) -> Self {
        let mut out = Self::zero();
        for i in 0..N {
            for j in 0..N {
                for k in 0..N - 1 {
                    out.c[idx(i, j, k + 1)] = self.c[idx(i, j, k)];
                }
                debug_assert!(self.c[idx(i, j, N - 1)] == 0.0, "z degree overflow");
            }
        }
        out
    }

    pub fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        let px = [1.0, x, x * x, x * x * x];
        let py = [1.0, y, y * y, y * y * y];
        let pz = [1.0, z, z * z, z * z * z];
        let mut s = 0.0;
        for (i, xi) in px.iter().enumerate() {
            for (j, yj) in py.iter().enumerate() {
                for (k, zk) in pz.iter().enumerate() {
                    let c = self.c[idx(i, j, k)];
                    if c != 0.0 {
                        s += c * xi * yj * zk;
                    }
                }
            }
        }
        s
    }

    /// Partial derivatives `(∂x, ∂y, ∂z)` at a point.
    pub fn gradient(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let p = |v: f64| [1.0, v, v * v, v * v * v];
        let d = |v: f64| [0.0, 1.0, 2.0 * v, 3.0 * v * v];
        let (px, py, pz) = (p(x), p(y), p(z));
        let (dx, dy, dz) = (d(x), d(y), d(z));
        let mut g = [0.0; 3];
        for i in 0..N {
            for j in 0..N {
                for k in 0..N {
                    let c = self.c[idx(i, j, k)];
                    if c != 0.0 {
                        g[0] += c * dx[i] * py[j] * pz[k];
                        g[1] += c * px[i] * dy[j] * pz[k];
                        g[2] += c * px[i] * py[j] * dz[k];
                    }
                }
            }
        }
        g
    }
}

impl Add for Poly {
    type Output = Poly;
    fn add(mut self, rhs: Poly) -> Poly {
        self.c.iter_mut().zip(rhs.c.iter()).for_each(|(a, b)| *a += b);
        self
    }
}

impl Sub for Poly {
    type Output = Poly;
    fn sub(mut self, rhs: Poly) -> Poly {
        self.c.iter_mut().zip(rhs.c.iter()).for_each(|(a, b)| *a -= b);
        self
    }
}

impl Mul for Poly {
    type Output = Poly;
    fn mul(self, rhs: Poly) -> Poly {
        let lhs_terms: Vec<(usize, usize, usize, f64)> = terms(&self);
        let rhs_terms: Vec<(usize, usize, usize, f64)> = terms(&rhs);
        let mut out = Poly::zero();
        for &(i, j, k, a) in &lhs_terms {
            for &(l, m, n, b) in &rhs_terms {
                debug_assert!(i + l < N && j + m < N && k + n < N, "degree overflow");
                out.c[idx(i + l, j + m, k + n)] += a * b;
            }
        }
        out
    }
}

fn terms(p: &Poly) -> Vec<(usize, usize, usize, f64)> {
    let mut v = Vec::with_capacity(20);
    for i in 0..N {
        for j in 0..N {
            for k in 0..N {
                let c = p.c[idx(i, j, k)];
                if c != 0.0 {
                    v.push((i, j, k, c));
                }
            }
        }
    }
    v
}

pub(crate) type PolyMat = [[Poly; 3]; 3];

pub(crate) fn mat_mul(a: &PolyMat, b: &PolyMat) -> PolyMat {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

pub(crate) fn transpose(a: &PolyMat) -> PolyMat {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub(crate) fn det(a: &PolyMat) -> Poly {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Entries of `2 E Eᵀ E − trace(E Eᵀ) E`.
pub(crate) fn trace_constraint(e: &PolyMat) -> [Poly; 9] {
    let eet = mat_mul(e, &transpose(e));
    let tr = eet[0][0] + eet[1][1] + eet[2][2];
    let eete = mat_mul(&eet, e);
    std::array::from_fn(|n| {
        let (i, j) = (n / 3, n % 3);
        eete[i][j].scale(2.0) - tr * e[i][j]
    })
}

/// Linear matrix pencil `x A + y B + z C + D`.
pub(crate) fn linear_combination(a: &[f64; 9], b: &[f64; 9], c: &[f64; 9], d: &[f64; 9]) -> PolyMat {
    std::array::from_fn(|i| std::array::from_fn(|j| Poly::linear(a[3 * i + j], b[3 * i + j], c[3 * i + j], d[3 * i + j])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_eval_agree() {
        let a = Poly::linear(1.0, -2.0, 0.5, 3.0);
        let b = Poly::linear(0.0, 4.0, 1.0, -1.0);
        let c = a * b * a;
        let (x, y, z) = (0.3, -1.2, 2.0);
        let direct = a.eval(x, y, z) * b.eval(x, y, z) * a.eval(x, y, z);
        assert!((c.eval(x, y, z) - direct).abs() < 1e-12);
        let h = 1e-6;
        let g = c.gradient(x, y, z);
        let fd = (c.eval(x + h, y, z) - c.eval(x - h, y, z)) / (2.0 * h);
        assert!((g[0] - fd).abs() < 1e-6);
        assert!((a.shift_z().eval(x, y, z) - z * a.eval(x, y, z)).abs() < 1e-12);
    }
}
