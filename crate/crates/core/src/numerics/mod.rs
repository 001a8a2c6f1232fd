//! Dense tensors, the kernels the attention stack is built from, and reverse-mode
//! autodiff over them.

mod autodiff;
mod backend;
mod element;
pub mod norm;
pub mod ops;
pub mod softmax;
pub mod solve;
mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use backend::{Backend, Eager, RowMap};
pub use element::Element;
pub use norm::{rmsnorm, silu_l2_normalize};
pub use ops::{add, matmul, mul, scale, sigmoid, silu, gelu, tanh, sub, Unary};
pub use solve::forward_substitution;
pub use tensor::Tensor;
