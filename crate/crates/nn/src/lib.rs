//! Minimal CPU tensor kernel with reverse-mode gradients.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
mod error;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{AttentionLayout, Backward, Graph, Var};
pub use layers::{CausalSelfAttention, Embedding, GruCell, LayerNorm, Linear, Mlp, TransformerBlock};
pub use optim::{adam_step, AdamConfig, StepReport};
pub use params::{Gradients, ParamId, ParameterStore};
pub use scalar::{dot, Scalar};
pub use tensor::{matmul, Tensor};
