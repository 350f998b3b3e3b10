//! Dense `f64` arrays with reverse-mode automatic differentiation.
//!
//! Arrays are row-major. Binary elementwise operations broadcast on trailing
//! dimensions. Gradients accumulate into a [`ParamStore`] until
//! [`ParamStore::zero_grad`] is called.

mod array;
pub mod checkpoint;
mod params;
mod tape;

pub use array::{broadcast_shape, Array};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{BinaryOp, Gradients, ReduceOp, Tape, UnaryOp, Var};
