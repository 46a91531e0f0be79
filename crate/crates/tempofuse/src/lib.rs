//! EDM subgenre classification from Mel-spectrogram and tempogram features.
//!
//! The pipeline runs audio -> DSP features -> fixed-width chunks -> CNN
//! models -> song-level majority vote. Gradients come from a small
//! reverse-mode autodiff kernel checked against finite differences.

pub mod audio;
pub mod data;
pub mod dsp;
pub mod error;
pub mod features;
pub mod mat;
pub mod models;
pub mod nn;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
