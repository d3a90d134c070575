//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("empty tensor not allowed here")]
    EmptyTensor,

    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("loss is detached from every parameter; nothing to differentiate")]
    DetachedLoss,

    #[error("all-zero latent cannot be power-normalized")]
    ZeroLatent,

    #[error("latent length {0} is odd; complex pairing needs an even length")]
    OddLatent(usize),

    #[error("fading coefficient magnitude {0:.3e} below deep-fade guard")]
    DeepFade(f64),

    #[error("parameters `{0}` are frozen; refusing to update them")]
    Frozen(String),

    #[error("parameters `{0}` must be frozen first")]
    NotFrozen(String),

    #[error("compression rate {num}/{den} not achievable; feasible rates: {feasible}")]
    UnachievableRate {
        num: u32,
        den: u32,
        feasible: String,
    },

    #[error("non-finite loss at {context} (epoch {epoch}, batch {batch}); aborting")]
    NonFiniteLoss {
        context: String,
        epoch: usize,
        batch: usize,
    },

    #[error("missing snapshot: {0}")]
    MissingSnapshot(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("configuration errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numeric failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFiniteLoss { .. } => 3,
            Error::Io(_) | Error::Png(_) | Error::Parse { .. } | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
