use std::path::PathBuf;

use thiserror::Error;

use crate::grid::SpaceTimePoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("grids do not overlap along the {axis} axis")]
    NoOverlap { axis: &'static str },

    #[error("point {0} is not part of the matched grid")]
    UnknownPoint(SpaceTimePoint),

    #[error("parameter {name} = {value} lies outside its range")]
    RangeViolation { name: String, value: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("kernel matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("emulator fit failed: {0}")]
    Fit(String),

    #[error("optimization failed: {0}")]
    Opt(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("missing upstream artifact {}", .0.display())]
    StageDependency(PathBuf),

    #[error("artifact {} was produced under config {found}, current config is {expected} (use --force to proceed)", artifact.display())]
    ConfigMismatch {
        artifact: PathBuf,
        expected: String,
        found: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for precondition failures, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::NotPositiveDefinite | Error::Fit(_) | Error::Opt(_) | Error::Estimation(_) => 3,
            _ => 2,
        }
    }
}
