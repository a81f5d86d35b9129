//! Dense tensor kernels with reverse-mode automatic differentiation.

pub mod kernels;
mod surrogate;
mod tape;

pub use kernels::ConvSpec;
pub use surrogate::{SurrogateConfig, SurrogateKind};
pub use tape::{Gradients, Precision, Tape, Var};
