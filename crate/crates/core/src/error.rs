use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("behind-camera point (z = {0})")]
    BehindCamera(f64),

    #[error("non-positive depth ({0})")]
    NonPositiveDepth(f64),

    #[error("underdetermined alignment: need at least 3 poses, got {0}")]
    UnderdeterminedAlignment(usize),

    #[error("degenerate alignment: camera centers are coincident or collinear")]
    DegenerateAlignment,

    #[error("underdetermined pose: {0} effective correspondences (need 3)")]
    UnderdeterminedPose(usize),

    #[error("degenerate configuration: singular value ratio {0:.3e}")]
    DegenerateConfiguration(f64),

    #[error("underdetermined epipolar fit: {0} joint-visible tracks (need 8)")]
    UnderdeterminedEpipolar(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite {what} at parameter {name} (index {index})")]
    NonFinite {
        what: &'static str,
        name: String,
        index: usize,
    },

    #[error("non-finite loss at iteration {iteration}: {diagnostics}")]
    Diverged {
        iteration: usize,
        diagnostics: String,
    },

    #[error("no supervisable frame pairs")]
    NoSupervisablePairs,

    #[error("too many clusters: requested {requested}, {available} tracks available")]
    TooManyClusters { requested: usize, available: usize },

    #[error("degenerate labels: training split holds a single class")]
    DegenerateLabels,

    #[error("no visible entries")]
    NoVisibleEntries,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
