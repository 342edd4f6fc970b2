use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdbError {
    #[error("every token is masked out; nothing to pool")]
    AllMasked,
    #[error("pooled descriptor has norm {0:e}; cosine is undefined")]
    ZeroVector(f64),
    #[error("controller state is at step {state_step} but the current step is {step}")]
    StaleState { state_step: usize, step: usize },
    #[error("could not place start and goal {min_hops} hops apart after {attempts} attempts")]
    Unsatisfiable { min_hops: usize, attempts: usize },
    #[error("node {from} cannot reach node {to}")]
    Unreachable { from: usize, to: usize },
    #[error("metrics requested over an empty episode set")]
    EmptySet,
    #[error("instruction must contain between 1 and {max} tokens, got {len}")]
    EmptyInstruction { len: usize, max: usize },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("checkpoint checksum mismatch (stored {stored}, computed {computed})")]
    ChecksumMismatch { stored: String, computed: String },
    #[error("plan change rate needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SdbError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SdbError::NonFiniteLoss { .. } | SdbError::NonFinite(_) | SdbError::ZeroVector(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, SdbError>;
