use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: no recorded forward pass reaches this value")]
    NothingRecorded,

    #[error("value belongs to a different tape")]
    ForeignVar,

    #[error("coupling weight v = {0} is below the invertibility bound 0.05")]
    UnsafeCoupling(f64),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{what} is out of scope at desk scale")]
    OutOfScope { what: &'static str },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::NonScalarLoss(_) => "non-scalar-loss",
            Error::NothingRecorded => "nothing-recorded",
            Error::ForeignVar => "foreign-var",
            Error::UnsafeCoupling(_) => "unsafe-coupling",
            Error::Invalid(_) => "invalid",
            Error::OutOfScope { .. } => "out-of-scope",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::Invalid(detail.into())
    }

    pub(crate) fn parse(offset: usize, detail: impl Into<String>) -> Self {
        Error::Parse { offset, detail: detail.into() }
    }
}
