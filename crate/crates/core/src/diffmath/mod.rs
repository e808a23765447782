//! Dense row-major matrices with a small reverse-mode tape.
//!
//! Everything is `f64` and every reduction runs in a fixed left-to-right
//! order, so a forward pass is bitwise reproducible on one platform.
//! Attention and the transformer blocks are composed from these primitives
//! in [`crate::model`]; there is no fused attention op.

mod check;
mod tape;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_coords, Stencil};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2D;
