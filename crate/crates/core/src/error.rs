use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by the CLI exit code they map to (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown domain `{0}`")]
    MissingDomain(String),

    #[error("domain `{0}` already exists")]
    DomainExists(String),

    #[error("running statistics of domain `{0}` were never initialised")]
    UninitializedStatistics(String),

    #[error("trace does not match the current parameters: {0}")]
    TraceMismatch(String),

    #[error("optimizer state error: {0}")]
    OptimizerState(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("crop error: {0}")]
    Crop(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numeric or fit failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::MissingDomain(_) | Error::DomainExists(_) => 2,
            Error::Data(_)
            | Error::Split(_)
            | Error::Crop(_)
            | Error::Spec(_)
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Csv(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
