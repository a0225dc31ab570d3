//! Reverse-mode differentiation over dense tensors.
//!
//! The op set is exactly what the graph network needs: affine maps,
//! activations, normalization, dropout, the classification loss, and the
//! graph-specific aggregations (edge-conditioned convolution and segment
//! pooling). Everything runs in `f64`.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod ops;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use ops::{softmax_rows, BatchStats};
pub use tape::{Tape, Var};

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
