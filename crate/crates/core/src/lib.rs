//! Two-stage masking autoencoder for multichannel speech enhancement.
//!
//! The crate is organised by subsystem:
//!
//! * [`numerics`]: tensors, reverse-mode differentiation, layers
//! * [`dsp`]: STFT / iSTFT and segmentation
//! * [`model`]: U-Net encoders/decoders, dual-path RNN, attention fusion,
//!   neural beamformer and the full two-stage forward pass
//! * [`loss`]: MAE and the combined T-F / time relative-error loss
//! * [`metrics`]: STOI and the STOI/WER composite
//! * [`data`]: WAV I/O, synthetic scenes and manifests
//! * [`trainer`]: Adam, early stopping and checkpoints
//! * [`checks`]: the finite-difference gradient suite
//! * [`cli`]: batch commands behind the `se3d` binary

pub mod checks;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
