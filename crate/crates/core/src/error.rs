use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of an operation (non-finite state, bad shape).
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters violate a model or experiment invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A state or moment became non-finite during time stepping.
    #[error("integration blew up at t = {time}")]
    Blowup { time: f64 },

    #[error("singular innovation covariance (condition number {condition:.3e})")]
    Singular { condition: f64 },

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("filter diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
