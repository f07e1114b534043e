use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid offspring distribution at arity {arity}: {reason}")]
    InvalidPmf { arity: usize, reason: String },

    #[error("invalid threshold vector for arity {arity}: {reason}")]
    InvalidThresholds { arity: usize, reason: String },

    #[error("argument {value} outside the domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stability condition violated: {0}")]
    Stability(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("level {level} is never crossed at t = {time}")]
    LevelNotCrossed { level: f64, time: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
