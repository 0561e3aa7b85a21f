//! Adaptive polynomial activations driven by auxiliary activation
//! networks, together with the small deep-learning stack needed to train
//! and compare them: dense tensors, tape-based reverse-mode autograd, a
//! finite-difference gradient checker, host layers, competing adaptive
//! activation baselines, dataset ingestion, and declarative model specs.

pub mod activation_net;
pub mod activations;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod variants;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvGeometry, PadMode, Tensor};
