//! Reverse-mode differentiation over dense tensors.

mod gradcheck;
mod mask;
mod tape;

pub use gradcheck::grad_check;
pub use mask::Mask2d;
pub use tape::{sigmoid, NormGroup, Tape, Var};

/// Guard used by every L2 normalization in the model.
pub const L2_EPS: f64 = 1e-12;
