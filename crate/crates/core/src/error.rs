use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// A 6-DOF direction in pose-parameter space, ordered `[tx, ty, tz, rx, ry, rz]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullDirection(pub [f64; 6]);

impl fmt::Display for NullDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 6] = ["tx", "ty", "tz", "rx", "ry", "rz"];
        let mut first = true;
        for (name, v) in NAMES.iter().zip(self.0.iter()) {
            if v.abs() < 1e-3 {
                continue;
            }
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{v:+.3}*{name}")?;
            first = false;
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

fn join_directions(dirs: &[NullDirection]) -> String {
    dirs.iter()
        .map(|d| format!("[{d}]"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate cell: need at least {needed} points, got {got}")]
    DegenerateCell { needed: usize, got: usize },

    #[error("insufficient overlap: no voxel pairs between the two scans")]
    InsufficientOverlap,

    #[error("rank-deficient normal matrix; unconstrained directions: {}", join_directions(.null_directions))]
    RankDeficient { null_directions: Vec<NullDirection> },

    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),

    #[error("weight file (format version {version}): {reason}")]
    WeightFormat { version: u32, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("filter rejected every voxel ({rejected} of {total})")]
    FilterStarved { rejected: usize, total: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("no network weights at {}; run `scanfilter train` to create them", .0.display())]
    MissingWeights(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
