//! Bidirectional one-shot unsupervised domain mapping.
//!
//! Two convolutional autoencoders, one per visual domain, are trained in two
//! phases: the multi-shot domain's autoencoder is pretrained alone, then
//! cloned to initialise the one-shot domain's autoencoder, and both are
//! optimised jointly under pixel-cycle, feature-cycle and variational losses
//! with per-term parameter freezing.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod networks;
pub mod objectives;
pub mod parallel;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Param, ParamGroup, TensorError, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
