//! Error type shared by every module.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A spatial dimension is below the minimum an operation supports.
    DimensionTooSmall {
        what: &'static str,
        got: usize,
        min: usize,
    },
    /// A spatial dimension is not divisible by the requested factor.
    NotDivisible {
        size: usize,
        factor: usize,
    },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// `z1` and `z2` are too close for the diversity ratio to be meaningful.
    DegenerateNoise {
        norm: f64,
    },
    /// A value that must be finite is NaN or infinite.
    NonFinite {
        context: String,
    },
    /// Invalid configuration value.
    Config(String),
    /// The dataset produced no usable samples.
    EmptyDataset(String),
    /// `train_fraction` outside (0, 1).
    FractionOutOfRange(f64),
    /// Fewer samples than the operation needs.
    TooFewSamples {
        got: usize,
        min: usize,
    },
    /// Malformed checkpoint or weight file.
    Checkpoint(String),
    /// Image decode failure.
    Decode {
        path: String,
        message: String,
    },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionTooSmall { what, got, min } => {
                write!(f, "{what} is {got}, needs at least {min}")
            }
            Error::NotDivisible { size, factor } => {
                write!(f, "dimension {size} is not divisible by factor {factor}")
            }
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => {
                write!(
                    f,
                    "shape mismatch in {context}: expected {expected}, got {got}"
                )
            }
            Error::DegenerateNoise { norm } => {
                write!(f, "noise vectors are degenerate: |z1 - z2| = {norm:e}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::EmptyDataset(root) => write!(f, "no usable samples in {root}"),
            Error::FractionOutOfRange(x) => {
                write!(f, "train_fraction {x} must lie strictly between 0 and 1")
            }
            Error::TooFewSamples { got, min } => {
                write!(f, "got {got} samples, need at least {min}")
            }
            Error::Checkpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            Error::Decode { path, message } => write!(f, "cannot decode {path}: {message}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
