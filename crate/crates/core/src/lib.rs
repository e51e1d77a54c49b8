//! Universal frequential perturbations (UFPs) for speaker-embedding privacy.
//!
//! A UFP is a small complex spectrogram patch learned once from a handful of a
//! user's utterances. At deployment it is tiled across the STFT of arbitrary
//! audio, which moves the audio's speaker embedding away from the speaker while
//! keeping the waveform close to the original.
//!
//! The crate is organised bottom-up:
//!
//! - [`audio`]: WAV I/O, mono mixdown and windowed-sinc resampling.
//! - [`dsp`]: STFT/iSTFT, their adjoints, and the mel filterbank.
//! - [`ufp`]: the perturbation type, the frequency smoother and the tiler.
//! - [`encoder`]: a differentiable surrogate speaker encoder and cosine scoring.
//! - [`optim`]: the training objective, augmentation, Adam and the training loop.
//! - [`eval`]: EER thresholds, protection metrics, RTC and the synthetic corpus.
//! - [`attacks`]: adaptive pre-processing attacks and the attack suite.

pub mod attacks;
pub mod audio;
pub mod dsp;
pub mod encoder;
mod error;
pub mod eval;
pub mod optim;
pub mod rng;
pub mod ufp;

pub use error::{Error, Result};

/// Working sample rate of the toolkit.
pub const SAMPLE_RATE: u32 = 16_000;
