//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records whole-tensor operations (matmul, linear, bias add,
//! elementwise ops, row softmax, layer norm, GELU/ReLU, embedding lookup,
//! cross-entropy, causal attention, sparse scatter-add). [`Tape::backward`]
//! walks the tape once in reverse and returns [`Gradients`] keyed by [`Var`].

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use kernels::{dot, matmul, matmul_nt};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
