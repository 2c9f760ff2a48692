//! Variational autoencoders with phase-type decoder likelihoods, trained
//! against a Gaussian-decoder baseline on heavy-tailed Pareto data.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fmt;
pub mod neural;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod phdist;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
