use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("non-finite value in {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },

    #[error("degenerate prediction: all corrected entries are nonpositive")]
    DegeneratePrediction,

    #[error("normalization degenerate: gamma {gamma} <= min(M) {min} + 1e-9")]
    NormalizationDegenerate { gamma: f64, min: f64 },

    #[error("undefined gradient proportion: series sums to zero")]
    UndefinedProportion,

    #[error("undefined noise fitting rate: mislabeled set is empty")]
    UndefinedNfr,

    #[error("invalid shift {shift} for a run of {epochs} epochs")]
    InvalidShift { shift: usize, epochs: usize },

    #[error("invalid noise rate {0}; must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("cannot place {k} centers at separation {separation} in {d} dimensions")]
    Infeasible { k: usize, d: usize, separation: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
