//! Training and evaluation toolkit for single-channel two-source speech
//! separation.
//!
//! The signal path is a magnitude-masking separator: the mixture is analysed
//! with an STFT, a temporal convolutional network predicts one mask per
//! output, the masks are normalized to sum to one, and each masked magnitude
//! is re-synthesized with the mixture phase. Because the masks sum to one the
//! estimates always add back up to the mixture.
//!
//! On top of that model the crate implements five training methods:
//!
//! * [`training::Method::Pit`] and [`training::Method::PitDm`]: supervised
//!   permutation invariant training, with and without dynamic mixing.
//! * [`training::Method::MixIt`]: mixture invariant training with a 4-output
//!   head fed mixtures of mixtures.
//! * [`training::Method::MixPit`]: permutation invariant training against the
//!   two constituent mixtures of a mixture of mixtures, using a 2-output model.
//! * [`training::Method::MixCycle`]: a one-step-stale teacher separates real
//!   mixtures, its estimates are remixed across mixtures and the student
//!   learns to separate the remixes.
//!
//! [`evaluation`] covers ground-truth SI-SNRi, the ideal-ratio-mask and
//! MixIT oracles, and reference-free self-evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
