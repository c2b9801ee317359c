//! Latent diffusion ensemble forecasting on gridded fields at desk scale.
//!
//! The crate covers the whole pipeline: synthetic data and the field file
//! format ([`grid`]), Fourier diagnostics ([`spectral`]), spectral
//! regularization targets ([`regularize`]), a small reverse-mode autodiff
//! engine ([`autodiff`]), streaming causal 3D convolution ([`causal3d`]), the
//! autoencoders ([`models`]), EDM diffusion ([`edm`]), ensemble rollout
//! ([`forecast`]), and probabilistic verification ([`verify`]). [`config`]
//! holds the run configuration and [`pipeline`] wires the stages together
//! for the `nimbus` binary.

pub mod autodiff;
pub mod causal3d;
pub mod config;
pub mod edm;
pub mod error;
pub mod forecast;
pub mod grid;
pub mod models;
pub mod pipeline;
pub mod regularize;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
