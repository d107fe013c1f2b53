//! Minimal reverse-mode automatic differentiation engine.
//!
//! Values are `f64` tensors recorded on a [`Tape`]; [`Tape::backward`] returns
//! [`Gradients`] for every differentiable leaf. [`AdamState`] implements the
//! optimizer used by the trainer.

mod adam;
pub(crate) mod conv;
mod tape;
mod tensor;

pub use adam::{AdamState, StepReport};
pub use tape::{Gradients, ScaleMode, Tape, TapeEntry, Var};
pub use tensor::{numel, Tensor};

pub(crate) use tape::upsample2x_values;
