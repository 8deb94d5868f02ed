use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unphysical state: {0}")]
    Unphysical(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("gain {gain} exceeds the physical bound {bound:.6}")]
    GainExceedsBound { gain: f64, bound: f64 },

    #[error("post-selection kept no shots out of {n_in} (expected acceptance rate {p_success_estimate:.3e})")]
    EmptyEnsemble { n_in: usize, p_success_estimate: f64 },

    #[error("insufficient shots: {0}")]
    InsufficientShots(String),

    #[error("record has already been filtered with gain {0}")]
    AlreadyFiltered(f64),

    #[error("{requested} shots need {bytes} bytes, over the in-memory budget of {budget} bytes; use the streaming sampler")]
    MemoryBudget {
        requested: usize,
        bytes: usize,
        budget: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
