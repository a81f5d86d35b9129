//! Spiking neurons with learnable spatio-temporal circuits, a recurrent
//! spiking frame predictor built from them, and the training and analysis
//! tooling around it.

pub mod analysis;
pub mod autodiff;
pub mod circuit;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod neuron;
pub mod prednet;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Precision, SurrogateConfig, SurrogateKind, Tape, Var};
pub use circuit::{CircuitConfig, CircuitVariant, Pathway};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use neuron::{NeuronKind, NeuronParams, NeuronState};
pub use prednet::{NetworkConfig, NetworkParams, RolloutPlan};
pub use tensor::Tensor;
