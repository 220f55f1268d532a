use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// The variants fall into three families that the CLI maps onto exit codes:
/// input/data problems, parameter-domain violations, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("numerical conditioning failure in component {component}: {message}")]
    Conditioning { component: usize, message: String },

    #[error("component {0} has no members")]
    EmptyComponent(usize),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stale input: {0}")]
    StaleInput(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Conditioning { .. }
                | Error::EmptyComponent(_)
                | Error::Initialization(_)
                | Error::Numerical(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
