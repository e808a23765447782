use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value {value} at coordinate {coord}")]
    NonFinite { coord: usize, value: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("could not place {count} objects on a {height}x{width} canvas after {attempts} attempts")]
    Placement {
        count: usize,
        height: usize,
        width: usize,
        attempts: usize,
    },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("missing scene {0:?}")]
    MissingScene(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
