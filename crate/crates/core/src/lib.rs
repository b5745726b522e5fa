//! Style-agnostic sketch-to-photo retrieval.
//!
//! A cross-modal VAE splits each image into a modality-invariant code (the
//! retrieval embedding) and a stochastic modality-specific code. The encoder is
//! trained episodically: an inner gradient step with randomized feature
//! transformations and a learned ℓ1 penalty on the invariant head, followed by a
//! second-order outer update of the initial weights and both hyper-parameter sets.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod meta;
pub mod model;
pub mod objectives;
pub mod par;
pub mod retrieval;
pub mod scalar;
pub mod seed;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
