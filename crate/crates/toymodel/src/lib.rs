//! A tiny decoder-only transformer over the gated attention operator, synthetic
//! tasks (parity, copy, associative recall), Adam training with an `α` schedule,
//! and checkpoints.

pub mod checkpoint;
pub mod error;
pub mod model;
pub mod optim;
pub mod tasks;
pub mod train;

pub use error::{Divergence, Result, ToyError};
pub use model::{build_model, forward, Model, ModelConfig, ModelParams};
pub use tasks::{gen_batch, gen_task, ParityTargets, Sample, TaskKind, TaskSpec};
pub use train::{evaluate, headline, train, Accuracy, StepRecord, TrainConfig, Trainer};
