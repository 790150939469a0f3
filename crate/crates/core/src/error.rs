use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("`{key}` = {value} is outside [{min}, {max}]")]
    OutOfRange { key: String, value: f64, min: f64, max: f64 },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("dimension mismatch in `{component}`: expected {expected}, got {actual}")]
    Dimension { component: &'static str, expected: usize, actual: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupted checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
