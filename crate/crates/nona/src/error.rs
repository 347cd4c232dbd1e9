use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate softmax row {0}: every score is -inf (over-masked prediction point)")]
    DegenerateRow(usize),

    #[error("softstep parameter order: require a < b, got a={a}, b={b}")]
    ParamOrder { a: f64, b: f64 },

    #[error("NONA training batch too small: need at least 2 points, got {0}")]
    BatchTooSmall(usize),

    #[error("head has no neighbor bank: call set_neighbor_bank after training")]
    NotFitted,

    #[error("insufficient neighbors: k={k} but only {n} points fitted")]
    InsufficientNeighbors { k: usize, n: usize },

    #[error("singular system: normal equations rank-deficient beyond ridge rescue")]
    SingularSystem,

    #[error("training diverged (non-finite loss) at epoch {0}")]
    Divergence(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
