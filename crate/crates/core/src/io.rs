//! Text formats: feature correspondences, pair metadata, dataset manifests
//! and benchmark tables.
//!
//! Correspondence files are CSV with a mandatory `# units=rad` or
//! `# units=deg` first line, an optional column header and eight columns
//! `u1,v1,scale1,angle1,u2,v2,scale2,angle2`. Metadata and manifests are
//! TOML. Benchmark tables are CSV with a fixed column order followed by
//! `#mean` and `#median` footer rows per solver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{from_row_major, to_row_major, CameraIntrinsics, ImagePoint, RelativePose, SiftCorrespondence, SiftFeature};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    fn parse(line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type FormatResult<T> = std::result::Result<T, FormatError>;

pub fn read_file(path: &Path) -> FormatResult<String> {
    std::fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_file(path: &Path, contents: &str) -> FormatResult<()> {
    std::fs::write(path, contents).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleUnit {
    Radians,
    Degrees,
}

impl AngleUnit {
    fn tag(&self) -> &'static str {
        match self {
            Self::Radians => "rad",
            Self::Degrees => "deg",
        }
    }

    fn read_angle(self, v: f64) -> f64 {
        match self {
            Self::Radians => v,
            Self::Degrees => v.to_radians(),
        }
    }

    fn write_angle(self, v: f64) -> f64 {
        match self {
            Self::Radians => v,
            Self::Degrees => v.to_degrees(),
        }
    }
}

pub const CORRESPONDENCE_COLUMNS: [&str; 8] = ["u1", "v1", "scale1", "angle1", "u2", "v2", "scale2", "angle2"];

/// Parses a correspondence file. Angles are converted to radians.
pub fn parse_correspondences(text: &str) -> FormatResult<Vec<SiftCorrespondence>> {
    let mut lines = text.lines().enumerate();
    let unit = loop {
        match lines.next() {
            None => return Err(FormatError::parse(1, "missing `# units=rad|deg` header")),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((i, l)) => {
                let tag = l.trim().strip_prefix('#').map(str::trim).and_then(|t| t.strip_prefix("units="));
                break match tag.map(str::trim) {
                    Some("rad") => AngleUnit::Radians,
                    Some("deg") => AngleUnit::Degrees,
                    _ => return Err(FormatError::parse(i + 1, "expected `# units=rad` or `# units=deg`")),
                };
            }
        }
    };

    let mut out = Vec::new();
    let mut header_allowed = true;
    for (i, line) in lines {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if std::mem::take(&mut header_allowed) && fields == CORRESPONDENCE_COLUMNS {
            continue;
        }
        if fields.len() != 8 {
            return Err(FormatError::parse(line_no, format!("expected 8 columns, found {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|_| FormatError::parse(line_no, format!("not a number: `{field}`")))?;
        }
        let feature = |u: f64, vv: f64, scale: f64, angle: f64| {
            SiftFeature::new(ImagePoint::new(u, vv), unit.read_angle(angle), scale)
                .map_err(|e| FormatError::parse(line_no, e.to_string()))
        };
        out.push(SiftCorrespondence::new(feature(v[0], v[1], v[2], v[3])?, feature(v[4], v[5], v[6], v[7])?));
    }
    Ok(out)
}

/// Writes correspondences with shortest round-trip decimal formatting.
pub fn write_correspondences(correspondences: &[SiftCorrespondence], unit: AngleUnit) -> String {
    let mut s = format!("# units={}\n{}\n", unit.tag(), CORRESPONDENCE_COLUMNS.join(","));
    for c in correspondences {
        let (a, b) = (&c.first, &c.second);
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            a.point.u,
            a.point.v,
            a.scale,
            unit.write_angle(a.angle),
            b.point.u,
            b.point.v,
            b.scale,
            unit.write_angle(b.angle)
        );
    }
    s
}

pub fn load_correspondences(path: &Path) -> FormatResult<Vec<SiftCorrespondence>> {
    parse_correspondences(&read_file(path)?)
}

/// Intrinsics, optional ground truth and identifiers of an image pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    /// Row-major intrinsics of the first camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<[f64; 9]>,
    /// Row-major ground-truth rotation from the first to the second camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    /// Indices of known inliers, for generated pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inliers: Option<Vec<usize>>,
}

impl PairMetadata {
    pub fn parse(text: &str) -> FormatResult<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| text[..s.start.min(text.len())].lines().count().max(1));
            FormatError::parse(line, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("metadata always serializes")
    }

    pub fn load(path: &Path) -> FormatResult<Self> {
        Self::parse(&read_file(path)?)
    }

    fn intrinsics(k: Option<[f64; 9]>, name: &str) -> FormatResult<CameraIntrinsics> {
        let k = k.ok_or_else(|| FormatError::Invalid(format!("metadata has no {name}")))?;
        CameraIntrinsics::from_matrix(&from_row_major(&k)).map_err(|e| FormatError::Invalid(format!("{name}: {e}")))
    }

    pub fn intrinsics1(&self) -> FormatResult<CameraIntrinsics> {
        Self::intrinsics(self.k1, "k1")
    }

    pub fn intrinsics2(&self) -> FormatResult<CameraIntrinsics> {
        Self::intrinsics(self.k2, "k2")
    }

    pub fn ground_truth_pose(&self) -> Option<RelativePose> {
        let r: Matrix3<f64> = from_row_major(&self.rotation?);
        let t = self.translation?;
        RelativePose::new(r, Vector3::new(t[0], t[1], t[2])).ok()
    }

    pub fn with_intrinsics(mut self, k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> Self {
        self.k1 = Some(to_row_major(&k1.matrix()));
        self.k2 = Some(to_row_major(&k2.matrix()));
        self
    }

    pub fn with_pose(mut self, pose: &RelativePose) -> Self {
        self.rotation = Some(to_row_major(&pose.rotation));
        let t = pose.translation;
        self.translation = Some([t.x, t.y, t.z]);
        self
    }
}

/// One image pair of a dataset manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub correspondences: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, rename = "pair")]
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> FormatResult<Self> {
        toml::from_str(text).map_err(|e| FormatError::parse(1, e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest always serializes")
    }

    /// Loads a manifest and resolves its paths against its directory.
    pub fn load(path: &Path) -> FormatResult<Self> {
        let mut m = Self::parse(&read_file(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in &mut m.pairs {
            p.correspondences = base.join(&p.correspondences);
            p.metadata = p.metadata.as_ref().map(|m| base.join(m));
        }
        Ok(m)
    }
}

/// Column order of benchmark tables.
pub const BENCHMARK_COLUMNS: [&str; 10] = [
    "pair_id",
    "solver",
    "rot_err_deg",
    "trans_err_deg",
    "focal_err",
    "wall_ms",
    "iterations",
    "models_scored",
    "inliers",
    "status",
];

/// One robust estimation run. Errors are empty when unavailable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub pair_id: String,
    pub solver: String,
    pub rot_err_deg: Option<f64>,
    pub trans_err_deg: Option<f64>,
    pub focal_err: Option<f64>,
    pub wall_ms: f64,
    pub iterations: usize,
    pub models_scored: usize,
    pub inliers: usize,
    /// `ok`, `no_model` or `error: <message>`.
    pub status: String,
}

impl BenchmarkRow {
    pub const OK: &'static str = "ok";
    pub const NO_MODEL: &'static str = "no_model";

    pub fn is_ok(&self) -> bool {
        self.status == Self::OK
    }

    pub fn failure(pair_id: &str, solver: &str, message: &str) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            solver: solver.to_string(),
            rot_err_deg: None,
            trans_err_deg: None,
            focal_err: None,
            wall_ms: 0.0,
            iterations: 0,
            models_scored: 0,
            inliers: 0,
            status: format!("error: {message}"),
        }
    }
}

/// Mean or median of every numeric column over one solver's rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// `#mean` or `#median`.
    pub pair_id: String,
    pub solver: String,
    pub rot_err_deg: Option<f64>,
    pub trans_err_deg: Option<f64>,
    pub focal_err: Option<f64>,
    pub wall_ms: Option<f64>,
    pub iterations: Option<f64>,
    pub models_scored: Option<f64>,
    pub inliers: Option<f64>,
    /// `rows=<n> failures=<k>`.
    pub status: String,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Mean and median rows per solver in order of first appearance. Run
/// statistics use every row; errors use the rows where they are present.
pub fn aggregate(rows: &[BenchmarkRow]) -> Vec<AggregateRow> {
    let mut solvers: Vec<&str> = Vec::new();
    for r in rows {
        if !solvers.contains(&r.solver.as_str()) {
            solvers.push(&r.solver);
        }
    }
    let mut out = Vec::new();
    for solver in solvers {
        let mine: Vec<&BenchmarkRow> = rows.iter().filter(|r| r.solver == solver).collect();
        let failures = mine.iter().filter(|r| !r.is_ok()).count();
        let present = |f: fn(&BenchmarkRow) -> Option<f64>| -> Vec<f64> { mine.iter().filter_map(|r| f(r)).collect() };
        let cols: [Vec<f64>; 7] = [
            present(|r| r.rot_err_deg),
            present(|r| r.trans_err_deg),
            present(|r| r.focal_err),
            present(|r| Some(r.wall_ms)),
            present(|r| Some(r.iterations as f64)),
            present(|r| Some(r.models_scored as f64)),
            present(|r| Some(r.inliers as f64)),
        ];
        for (label, stat) in [("#mean", mean as fn(&[f64]) -> Option<f64>), ("#median", median)] {
            out.push(AggregateRow {
                pair_id: label.to_string(),
                solver: solver.to_string(),
                rot_err_deg: stat(&cols[0]),
                trans_err_deg: stat(&cols[1]),
                focal_err: stat(&cols[2]),
                wall_ms: stat(&cols[3]),
                iterations: stat(&cols[4]),
                models_scored: stat(&cols[5]),
                inliers: stat(&cols[6]),
                status: format!("rows={} failures={}", mine.len(), failures),
            });
        }
    }
    out
}

fn csv_error(e: csv::Error) -> FormatError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    FormatError::parse(line, e.to_string())
}

/// Benchmark CSV with the aggregate footer.
pub fn write_benchmark(rows: &[BenchmarkRow]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(BENCHMARK_COLUMNS).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    for a in aggregate(rows) {
        w.serialize(a).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
}

/// Parses a benchmark CSV into data rows and footer rows.
pub fn parse_benchmark(text: &str) -> FormatResult<(Vec<BenchmarkRow>, Vec<AggregateRow>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(csv_error)?.clone();
    if headers.iter().collect::<Vec<_>>() != BENCHMARK_COLUMNS {
        return Err(FormatError::parse(1, "unexpected benchmark columns"));
    }
    let mut rows = Vec::new();
    let mut footer = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.get(0).is_some_and(|id| id.starts_with('#')) {
            footer.push(record.deserialize(Some(&headers)).map_err(csv_error)?);
        } else {
            rows.push(record.deserialize(Some(&headers)).map_err(csv_error)?);
        }
    }
    Ok((rows, footer))
}
