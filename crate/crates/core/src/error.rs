use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("price {price} outside no-arbitrage bounds ({lower}, {upper})")]
    OutOfBounds { price: f64, lower: f64, upper: f64 },

    #[error("implied volatility not bracketed by [{lo}, {hi}]")]
    NotBracketed { lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} is not below the last leverage maturity {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },

    #[error("time grid: {0}")]
    Grid(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("zero vega for option {index}")]
    DegenerateVega { index: usize },

    #[error("node {0} is not on this tape")]
    NotOnTape(usize),

    #[error("training diverged at iteration {iteration} (batch seed {seed:#x})")]
    Diverged { iteration: usize, seed: u64 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
