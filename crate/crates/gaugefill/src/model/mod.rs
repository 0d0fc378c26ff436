//! The interpolation model: input and relative-position embeddings, stacked
//! shielded-attention encoder layers, prediction head, loss, checkpointing.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod infer;
pub mod params;

pub use config::{EmbeddingKind, ModelConfig, PositionMode};
pub use forward::{build_plan, forward, masked_mse_loss, ForwardInput, ForwardPass};
pub use infer::{infer, InferInput, InferStats};
pub use params::ModelParams;
