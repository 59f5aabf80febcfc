//! Transformer encoder with a learnable Gaussian localness bias on self-attention.
//!
//! Layout:
//! * [`tensor`]: dense `f64` tensors, a define-by-run tape, and a finite-difference checker.
//! * [`attention`]: center/window prediction, the Gaussian bias, and multi-head attention.
//! * [`model`]: the encoder stack with per-layer localness gating.
//! * [`tasks`], [`optim`], [`train`]: synthetic tasks, Adam, and the training/evaluation loops.

pub mod attention;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use attention::{AttentionTrace, WindowStrategy};
pub use error::{Error, Result};
pub use model::{Encoder, EncoderConfig};
pub use tasks::{TaskKind, TaskSpec};
pub use tensor::{Tape, Tensor, Var};
pub use train::{evaluate, train, EvalReport, Trainer, TrainingConfig};
