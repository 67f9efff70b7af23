//! Dense tensors and a reverse-mode gradient tape.
//!
//! Just enough machinery for small diffusion transformers: linear layers, layer
//! norm, GELU/SiLU, masked multi-head attention, reshapes and concatenation.
//! Everything runs single-threaded, so identical inputs give bit-identical
//! results.

mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod io;
mod scalar;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamGradCheck};
pub use graph::{Graph, MacCount, Var, LAYER_NORM_EPS};
pub use scalar::Scalar;
pub use tensor::{numel, Tensor};
