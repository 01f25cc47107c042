//! Blind MIMO equalization with variational-autoencoder (VAE) losses.
//!
//! The crate is organised around the processing chain of a blind receiver:
//!
//! * [`signal`]: constellations, Gray labels, pulse shaping.
//! * [`channel`]: the uncoupled multi-core fiber link model with
//!   polarization rotation, PMD, residual CD, Wiener phase noise and AWGN.
//! * [`equalizer`]: complex butterfly FIR banks used both as equalizer and
//!   as channel estimator, plus Adam.
//! * [`losses`]: soft demapping, the KL/reconstruction VAE objective, the
//!   constant-modulus and pilot-aided losses, all with exact gradients.
//! * [`cpr`]: blind phase search, hard and with a softened backward pass.
//! * [`metrics`]: BMI, SER, SNR estimation, ambiguity alignment and the
//!   min/mean/max aggregation.

pub mod channel;
pub mod cpr;
pub mod equalizer;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod signal;

pub use error::{Error, Result};
pub use num_complex::Complex64;
