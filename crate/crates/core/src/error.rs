use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Format {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("unknown covariate assignment: {0}")]
    UnknownCovariate(String),

    #[error("unknown name: {0}")]
    UnknownName(String),

    #[error("no matched controls for covariate assignment {0}")]
    MissingControls(String),

    #[error("gene lists differ: {0}")]
    GeneMismatch(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Short machine-parsable code used by the command-line driver.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Format { .. } => "E_FORMAT",
            Error::DimensionMismatch(_) => "E_DIMENSION",
            Error::InvalidData(_) => "E_DATA",
            Error::UnknownCovariate(_) => "E_UNKNOWN_COVARIATE",
            Error::UnknownName(_) => "E_UNKNOWN_NAME",
            Error::MissingControls(_) => "E_MISSING_CONTROLS",
            Error::GeneMismatch(_) => "E_GENE_MISMATCH",
            Error::Split(_) => "E_SPLIT",
            Error::Training(_) => "E_TRAIN",
            Error::Metric(_) => "E_METRIC",
            Error::InvalidArgument(_) => "E_ARGUMENT",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
