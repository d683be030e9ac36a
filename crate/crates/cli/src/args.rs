//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use siftpose_core::solvers::SolverKind;

#[derive(Debug, Parser)]
#[command(name = "siftpose", version, about = "Relative pose from orientation- and scale-covariant features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a minimal solver on exactly one minimal sample.
    Solve(SolveArgs),
    /// Robust estimation over a correspondence file.
    Ransac(RansacArgs),
    /// Synthetic experiments written as CSV.
    BenchSynthetic(BenchSyntheticArgs),
    /// Robust estimation over every pair of a dataset manifest.
    BenchDataset(BenchDatasetArgs),
    /// Write synthetic fixtures.
    #[command(subcommand)]
    Generate(GenerateCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Problem {
    F4sift,
    E3sift,
    Ff3sift,
    F7pt,
    E5pt,
    Ff6pt,
}

impl From<Problem> for SolverKind {
    fn from(p: Problem) -> Self {
        match p {
            Problem::F4sift => SolverKind::F4Sift,
            Problem::E3sift => SolverKind::E3Sift,
            Problem::Ff3sift => SolverKind::FF3Sift,
            Problem::F7pt => SolverKind::F7pt,
            Problem::E5pt => SolverKind::E5pt,
            Problem::Ff6pt => SolverKind::FF6pt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub problem: Problem,
    /// Correspondence CSV holding exactly the minimal sample.
    #[arg(long)]
    pub input: PathBuf,
    /// Pair metadata with the intrinsics; required by the essential and focal problems.
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RansacArgs {
    #[arg(long, value_enum)]
    pub problem: Problem,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Inlier threshold in pixels.
    #[arg(long, default_value_t = 0.75)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.99)]
    pub confidence: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub lo: Switch,
    /// Report wall times; off reports zero so output is reproducible.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub timing: Switch,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    Stability,
    Noise,
    FocalStability,
    RansacSpeedup,
}

#[derive(Debug, Args)]
pub struct BenchSyntheticArgs {
    #[arg(long, value_enum)]
    pub experiment: Experiment,
    /// Trials per solver, or problems for the speedup experiment.
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated solver ids; every applicable solver by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub solvers: Vec<Problem>,
    /// Noise level of the stability experiments in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Noise levels of the noise experiment.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 2.0])]
    pub sigmas: Vec<f64>,
    /// Inlier ratios of the speedup experiment.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6])]
    pub inlier_ratios: Vec<f64>,
    /// Correspondences per speedup problem.
    #[arg(long, default_value_t = 200)]
    pub correspondences: usize,
    /// Noise of the speedup problems in pixels.
    #[arg(long, default_value_t = 0.5)]
    pub problem_sigma: f64,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub timing: Switch,
}

#[derive(Debug, Args)]
pub struct BenchDatasetArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub pairs: PathBuf,
    /// A single solver; combined with `--solvers` when both are given.
    #[arg(long, value_enum)]
    pub problem: Option<Problem>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub solvers: Vec<Problem>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.99)]
    pub confidence: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub lo: Switch,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub timing: Switch,
}

#[derive(Debug, Subcommand)]
pub enum GenerateCommand {
    /// A minimal sample of one synthetic scene with its metadata.
    Sample(GenerateSampleArgs),
    /// Planted-outlier pairs with a manifest.
    Dataset(GenerateDatasetArgs),
}

#[derive(Debug, Args)]
pub struct GenerateSampleArgs {
    #[arg(long, value_enum)]
    pub problem: Problem,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Correspondence CSV to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Metadata file; the output path with a `.toml` extension by default.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateDatasetArgs {
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub correspondences: usize,
    #[arg(long, default_value_t = 0.6)]
    pub inlier_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}
