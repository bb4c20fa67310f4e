//! Reverse-mode differentiation over dense tensors.

mod conv;
mod elementwise;
pub mod gradcheck;
mod spatial;
mod tape;

pub use conv::conv_out_extent;
pub use elementwise::{BinaryOp, UnaryOp};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use tape::{Gradients, ParamStore, Tape, Var};
