//! Polyphonic sound event detection on multichannel (FOA / tetrahedral MIC)
//! audio: scene synthesis, log-mel features, spectrogram augmentation, a
//! CRNN trained from scratch, Dice-family losses and segment-based scoring.

pub mod audiofeat;
pub mod augment;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod real;
pub mod scenegen;
pub mod seed;

pub use error::{Error, Result};
