//! Dense networks over a flat parameter vector, with exact reverse-mode
//! gradients.

mod dense;
mod optim;
mod params;
mod tape;

pub use dense::{Binding, DenseNet};
pub use optim::{Optimizer, OptimizerState};
pub use params::{ParamSlot, ParamStore};
pub use tape::{grad, Activation, Tape, Var};
