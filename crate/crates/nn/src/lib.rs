//! Reverse-mode automatic differentiation over 64-bit row-major matrices,
//! with the transformer layers, optimizer, schedules and checkpoint format
//! the models are built from.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use layers::{FeedForward, LayerNorm, Linear, MultiHeadAttention, LN_EPS};
pub use optim::{clip_grad_norm, lr_schedule, AdamW, LrSchedule, OptimizerState, MAX_GRAD_NORM};
pub use params::{Grads, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Fault, OpKind, Tape, Var};
pub use tensor::{NnError, Tensor};
