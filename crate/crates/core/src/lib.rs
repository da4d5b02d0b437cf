//! Concept-neuron identification in a toy text-conditioned diffusion model.
//!
//! The crate is organised by subsystem:
//!
//! - [`scene`]: procedural subjects, prompts, datasets and the oracle detector
//! - [`denoiser`]: noise schedule, the cross-attention U-Net with exact
//!   reverse-mode gradients, training and sampling
//! - [`implant`]: concept-implanting losses and mask-restricted fine-tuning
//! - [`scope`]: the concept-neuron criterion and mask search
//! - [`mask`]: the concept-neuron mask value type and its binary format

mod binio;
pub mod denoiser;
pub mod error;
pub mod implant;
pub mod mask;
pub mod rng;
pub mod scene;
pub mod scope;

pub use error::{Error, Result};
