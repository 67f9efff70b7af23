use ditlab_numerics::NumericsError;
use thiserror::Error;

use crate::arch::ValidationResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(ValidationResult),

    #[error("unknown preset {name:?}; available presets: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("resolution {resolution} px is not supported: {reason}")]
    Resolution { resolution: usize, reason: String },

    #[error("input mismatch: {0}")]
    Input(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error(
        "non-finite loss at step {step} (lr {lr:e}, last grad norm {grad_norm:e}, text-encoder grad norm {text_grad_norm:e})"
    )]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        grad_norm: f64,
        text_grad_norm: f64,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
