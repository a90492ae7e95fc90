use std::path::PathBuf;

/// Errors produced anywhere in the estimation, simulation and reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The operation needs a finalized JPD (no pending unmeasured entries).
    #[error("state error: {0}")]
    State(String),

    #[error("interpolation impossible: {0}")]
    Interpolation(String),

    #[error("filter at threshold {threshold} removed every plane")]
    EmptyFilter { threshold: f64 },

    #[error("plane ({dx}, {dy}) has zero mean and cannot be normalized")]
    DegeneratePlane { dx: i32, dy: i32 },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("size guard: {0}")]
    TooLarge(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
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
}

pub type Result<T> = std::result::Result<T, Error>;
