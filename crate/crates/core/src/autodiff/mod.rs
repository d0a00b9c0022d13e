//! Reverse-mode automatic differentiation over matrix-valued expressions.
//!
//! A [`Tape`] is built fresh for every step. Parameters are registered by
//! name with a trainable flag; [`Tape::backward`] returns a gradient map
//! containing only trainable parameters reachable from the loss.
//!
//! Top-K routing uses [`Tape::mask_select`]: the selection is treated as a
//! constant, gradients flow only through the kept entries.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheck};
pub use tape::{softmax_rows, Gradients, Tape, Var};
