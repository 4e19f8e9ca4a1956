//! Adversarial activation-pathway analysis for a miniature Inception-style
//! CNN: from-scratch autodiff, targeted l2 PGD, neuron importance and
//! connection influence, pathway-graph assembly and export.

pub mod attack;
pub mod autodiff;
pub mod explain;
pub mod model;
pub mod ops;
pub mod pathway;
pub mod pipeline;
pub mod store;
pub mod tensor;

pub use attack::{AttackConfig, AttackResult, Epsilon};
pub use autodiff::{Gradients, Tape, Var};
pub use pathway::{Context, NeuronId, PathwayGraph};
pub use tensor::{Padding, Tensor, TensorError};
