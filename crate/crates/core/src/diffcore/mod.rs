//! Differentiation, network evaluation, and optimization substrate.
//!
//! Everything trainable in this crate flows through here: a batched
//! reverse-mode tape over dense f64 matrices, MLP definition and
//! initialization, Adam, the warmup+cosine learning-rate schedule, and
//! checkpoint serialization.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, lr_schedule, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{Activation, MlpSpec};
pub use params::{BoundParams, ParamSet};
pub use tape::{Grads, NodeId, RayLayout, Tape};
pub use tensor::Tensor;
