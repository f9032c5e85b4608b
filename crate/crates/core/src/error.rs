//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` names the offending setting.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Argument outside the domain of an operation (negative time, nonpositive rate, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Operator has an eigenvalue with nonpositive real part, or a factorization hit a zero pivot.
    #[error("stability error: {0}")]
    Stability(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported size: n = {n} exceeds the dense threshold {threshold}")]
    UnsupportedSize { n: usize, threshold: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("interpolation error: {0}")]
    Interpolation(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    #[error("sampler corruption: {0}")]
    SamplerCorruption(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("unknown facility `{0}`")]
    UnknownFacility(String),

    #[error("simulation blew up at step {step}: |y| = {norm:e}")]
    BlowUp { step: usize, norm: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    /// Errors caused by numerics rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Stability(_)
                | Error::Numerical(_)
                | Error::BlowUp { .. }
                | Error::SamplerCorruption(_)
        )
    }
}
