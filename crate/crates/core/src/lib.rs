//! Linearized attention with delta-rule / DeltaProduct fast-weight memory.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: tensors, kernels, a unit-lower-triangular solver and a tape-based
//!   autodiff, all behind the [`numerics::Backend`] trait so model code runs either
//!   eagerly or on a tape.
//! * [`memory`]: the fast-weight state, the sequential delta rule (the reference),
//!   DeltaProduct sub-steps and the chunkwise-parallel update.
//! * [`expansion`]: derivative / rotary virtual tokens.
//! * [`attention`]: the gated softmax + linear attention operator and its
//!   bounded decoding cache.
//! * [`schedule`]: mixing-weight schedules over training steps.

pub mod attention;
pub mod error;
pub mod expansion;
pub mod memory;
pub mod numerics;
pub mod schedule;

pub use error::{Error, Result};
pub use numerics::{Tensor, Element};
