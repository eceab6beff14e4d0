use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, channel counts, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An iterative solver produced a non-finite objective.
    #[error("solver diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    /// The unrolled forward pass produced a non-finite activation.
    #[error("forward pass diverged in {stage}")]
    ForwardDivergence { stage: String },

    /// Training hit a non-finite loss or gradient.
    #[error("training diverged: {0}")]
    Training(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checkpoint error in field `{field}`: {message}")]
    Checkpoint { field: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
