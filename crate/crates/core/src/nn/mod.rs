//! Reverse-mode autodiff, the LSTM allocator, its optimizer and checkpoints.

pub mod checkpoint;
pub mod lstm;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::CheckpointError;
pub use model::{forward, init_params, predict, ModelSpec, Params, ShapeError};
pub use optim::{cosine_lr, AdamState};
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;
