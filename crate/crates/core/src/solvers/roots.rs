//! Real roots of low-degree polynomials and real eigenpairs of small
//! non-symmetric matrices.

use nalgebra::{DMatrix, DVector};

/// Conjugate pairs with `|Im| < COMPLEX_TOLERANCE · |Re|` count as a real
/// double root.
pub const COMPLEX_TOLERANCE: f64 = 1e-10;

/// Real roots of `c3 x³ + c2 x² + c1 x + c0`, each polished by one Newton
/// step. Falls back to the quadratic/linear case when the leading
/// coefficient vanishes.
pub fn real_cubic_roots(c3: f64, c2: f64, c1: f64, c0: f64) -> Vec<f64> {
    let scale = c3.abs().max(c2.abs()).max(c1.abs()).max(c0.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if c3.abs() <= 1e-14 * scale {
        return real_quadratic_roots(c2, c1, c0);
    }
    let a = c2 / c3;
    let b = c1 / c3;
    let c = c0 / c3;
    // depressed cubic t³ + p t + q with x = t − a/3
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0) * (q / 2.0) + (p / 3.0) * (p / 3.0) * (p / 3.0);

    let mut roots = Vec::with_capacity(3);
    // a discriminant within rounding noise of zero is a double root
    let noise = 1e-12 * ((q / 2.0) * (q / 2.0) + (p / 3.0).abs().powi(3));
    if disc.abs() <= noise && p != 0.0 {
        let u = (-q / 2.0).cbrt();
        roots.push(2.0 * u - shift);
        roots.push(-u - shift);
    } else if disc > 0.0 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        let re = u + v;
        roots.push(re - shift);
        // the conjugate pair −(u+v)/2 ± i √3 (u−v)/2
        let pair_re = -re / 2.0 - shift;
        let pair_im = (3f64.sqrt() / 2.0 * (u - v)).abs();
        if pair_im < COMPLEX_TOLERANCE * pair_re.abs() {
            roots.push(pair_re);
        }
    } else if p == 0.0 {
        roots.push(-shift);
    } else {
        let r = (-p / 3.0).sqrt();
        let phi = (3.0 * q / (2.0 * p * r)).clamp(-1.0, 1.0).acos();
        for k in 0..3 {
            let t = 2.0 * r * ((phi - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos();
            roots.push(t - shift);
        }
    }
    let eval = |x: f64| ((c3 * x + c2) * x + c1) * x + c0;
    for x in roots.iter_mut() {
        let f = eval(*x);
        let df = (3.0 * c3 * *x + 2.0 * c2) * *x + c1;
        let next = *x - f / df;
        // near a double root the derivative vanishes and the step is noise
        if next.is_finite() && eval(next).abs() < f.abs() {
            *x = next;
        }
    }
    roots
}

pub fn real_quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return Vec::new();
    }
    if a.abs() <= 1e-14 * scale {
        if b == 0.0 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        let re = -b / (2.0 * a);
        let im = (-disc).sqrt() / (2.0 * a.abs());
        return if im < COMPLEX_TOLERANCE * re.abs() { vec![re] } else { Vec::new() };
    }
    // numerically stable pair
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    if q == 0.0 {
        return vec![0.0];
    }
    vec![q / a, c / q]
}

/// Eigenvalues whose imaginary part is below `tolerance · |Re|`.
pub fn real_eigenvalues(m: &DMatrix<f64>, tolerance: f64) -> Vec<f64> {
    let Some(schur) = m.clone().try_schur(1e-14, 10_000) else {
        return Vec::new();
    };
    schur
        .complex_eigenvalues()
        .iter()
        .filter(|ev| ev.re.is_finite() && ev.im.abs() <= tolerance * ev.re.abs())
        .map(|ev| ev.re)
        .collect()
}

/// Real eigenvalues of a square matrix together with unit eigenvectors
/// (smallest right singular vector of `M − λI`).
pub fn real_eigenpairs(m: &DMatrix<f64>, tolerance: f64) -> Vec<(f64, DVector<f64>)> {
    let n = m.nrows();
    let mut out = Vec::new();
    for lambda in real_eigenvalues(m, tolerance) {
        let shifted = m - DMatrix::identity(n, n) * lambda;
        let svd = shifted.svd(false, true);
        let Some(vt) = svd.v_t else { continue };
        let k = svd.singular_values.imin();
        out.push((lambda, vt.row(k).transpose()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(roots: &[f64], expected: &[f64]) {
        let mut r = roots.to_vec();
        r.sort_by(|a, b| a.total_cmp(b));
        assert_eq!(r.len(), expected.len(), "{r:?}");
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{r:?} vs {expected:?}");
        }
    }

    #[test]
    fn cubic_cases() {
        // (x − 1)(x − 2)(x + 3)
        check(&real_cubic_roots(1.0, 0.0, -7.0, 6.0), &[-3.0, 1.0, 2.0]);
        // (x − 2)(x² + 1)
        check(&real_cubic_roots(1.0, -2.0, 1.0, -2.0), &[2.0]);
        // x³
        check(&real_cubic_roots(2.0, 0.0, 0.0, 0.0), &[0.0]);
        // degenerate leading coefficient → quadratic (x − 1)(x − 4)
        check(&real_cubic_roots(0.0, 1.0, -5.0, 4.0), &[1.0, 4.0]);
        // (x − 1)² (x − 5): double root resolved by the tolerance rule
        let r = real_cubic_roots(1.0, -7.0, 11.0, -5.0);
        assert!(r.iter().any(|x| (x - 5.0).abs() < 1e-9));
        assert!(r.iter().any(|x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn cubic_random_against_expansion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
            let (c2, c1, c0) = (-(r[0] + r[1] + r[2]), r[0] * r[1] + r[1] * r[2] + r[0] * r[2], -r[0] * r[1] * r[2]);
            let got = real_cubic_roots(1.0, c2, c1, c0);
            for x in r {
                assert!(got.iter().any(|g| (g - x).abs() < 1e-6 * (1.0 + x.abs())), "{got:?} {r:?}");
            }
        }
    }

    #[test]
    fn eigenpairs_of_a_companion_matrix() {
        // x³ − 6x² + 11x − 6 = (x−1)(x−2)(x−3)
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 6.0, -11.0, 6.0]);
        let mut ev: Vec<f64> = real_eigenpairs(&m, 1e-10).iter().map(|p| p.0).collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        check(&ev, &[1.0, 2.0, 3.0]);
    }
}
