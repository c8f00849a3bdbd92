//! Joint neural echo cancellation and beamforming with double-talk gating.

pub mod aec;
pub mod audio;
pub mod baseline;
pub mod beamformer;
pub mod checkpoint;
pub mod config;
pub mod dsp;
mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod sim;
pub mod spectral;
pub mod stft;
pub mod train;

pub use audio::AudioClip;
pub use error::{Error, Result};
pub use stft::{Spectrogram, Stft, StftConfig};
