//! Diffusion-transformer laboratory: configurable U-ViT and cross-attention DiT
//! backbones, an analytic cost model, toy diffusion training and sampling,
//! local-condition schemes and caption statistics.

pub mod arch;
pub mod captions;
pub mod backbone;
pub mod conditioning;
pub mod cost;
pub mod diffusion;
mod error;
pub mod model;
pub mod text;
pub mod train;

pub use arch::{preset, token_counts, validate, ArchConfig, Family, TimeConditioning, TokenBreakdown};
pub use backbone::{skip_pairing, ForwardInputs, Network};
pub use conditioning::{attach_condition, ConditionKind, ConditionMode, ConditioningSpec};
pub use cost::{macs, param_count, CostReport, MacsMode};
pub use diffusion::{ddim_sample, q_sample, shifted_schedule, training_loss, DiffusionSchedule, EpsPredictor, SamplerConfig};
pub use error::{Error, Result};
pub use model::TextToImage;
