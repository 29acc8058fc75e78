use thiserror::Error;

#[derive(Debug, Error)]
pub enum MbaError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unknown {kind} {id}")]
    Lookup { kind: &'static str, id: usize },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate distribution: every logit is masked")]
    DegenerateDistribution,
    #[error("invalid state: {0}")]
    State(String),
    #[error("coverage error: node {0} is adjacent but absent from the global action space")]
    Coverage(usize),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MbaError>;

pub(crate) fn node_lookup(id: usize) -> MbaError {
    MbaError::Lookup { kind: "node", id }
}
