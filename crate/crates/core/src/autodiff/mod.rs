//! Reverse-mode automatic differentiation over [`Tensor`](crate::Tensor)s.

mod gradcheck;
mod mask;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use mask::CausalMask;
pub use tape::{Tape, Var, MASKED};
