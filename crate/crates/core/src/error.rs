use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the domain of a profile function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration document failed validation. Every violation is listed.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("unknown topology preset `{0}`")]
    UnknownPreset(String),

    #[error("unknown policy `{0}`")]
    UnknownPolicy(String),

    #[error("state shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("value iteration did not converge within {0} iterations")]
    NoConvergence(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
