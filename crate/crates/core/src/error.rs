use thiserror::Error;

/// Errors produced by the geometry, constraint and solver layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("feature scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("point lies on the line at infinity of the homography (projective depth {0:e})")]
    PointAtInfinity(f64),
    #[error("local affinity is not orientation preserving (det = {0:e})")]
    MirroredFeature(f64),
    #[error("intrinsics matrix is singular")]
    SingularIntrinsics,
    #[error("focal length must be positive, got {0}")]
    NonPositiveFocal(f64),
    #[error("zero-length direction vector")]
    ZeroVector,
    #[error("expected {expected} correspondences, got {got}")]
    WrongSampleSize { expected: usize, got: usize },
    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),
    #[error("ill-conditioned sample: {0}")]
    IllConditioned(&'static str),
    #[error("no real solution with a positive focal length")]
    NoValidFocal,
    #[error("no pose candidate places any point in front of both cameras")]
    DegenerateConfiguration,
    #[error("resampling cap of {0} attempts exceeded")]
    ResampleCapExceeded(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
