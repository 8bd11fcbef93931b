//! Dense tensors, a Wengert-tape reverse-mode autodiff engine, and the
//! compute kernels behind the RadFormer layers.
//!
//! Kernels run data-parallel on rayon when the `parallel` feature is on
//! (the default) and sequentially otherwise; both produce bitwise-identical
//! results because each output element is reduced in a fixed order.

pub mod checkpoint;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod parallel;
pub mod param;
mod tape;
pub mod tensor;

pub use element::{lit, Element};
pub use error::{Result, TensorError};
pub use param::{Buffer, BufferId, Init, ParamId, ParamStore, Parameter, RunningUpdate};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
