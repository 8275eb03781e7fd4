//! Dense reverse-mode automatic differentiation and Adam.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use params::{Binder, Param, ParamId, ParamStore};
pub use tape::{softmax, Gradients, Tape, Var};
