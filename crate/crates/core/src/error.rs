use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid space configuration: {0}")]
    InvalidSpace(String),

    #[error("graph is disconnected; the semigroup would not be irreducible")]
    Disconnected,

    #[error("graph weights are not symmetric at ({0}, {1})")]
    AsymmetricWeights(usize, usize),

    #[error("size mismatch: expected a vector of length {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("derivation kind does not match the space backend: {0}")]
    BackendMismatch(String),

    #[error("implicit step solve failed at step {step} (t = {time}): {report}")]
    SolveFailure {
        step: usize,
        time: f64,
        report: String,
    },

    #[error("derivation is not divergence-free: ||div c||_inf = {0:.3e}")]
    NotDivergenceFree(f64),

    #[error("flow integration aborted: {0}")]
    FlowAborted(String),

    #[error("sampling failed: {0}")]
    SamplingFailure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed array file: {0}")]
    MalformedArrayFile(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
