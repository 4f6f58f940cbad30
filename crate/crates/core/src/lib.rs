//! Continuous-time recurrent networks, the ODE-LSTM, and tooling to train
//! them by backpropagation through time and to measure how gradients flow
//! through their state.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// `Var::add` etc. return `Result`, so the operator traits do not fit.
#![allow(clippy::should_implement_trait)]

pub mod blob;
pub mod cells;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod solver;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
