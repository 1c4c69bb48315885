//! Unrolled multi-coil MRI reconstruction at desk scale.
//!
//! The crate simulates Cartesian multi-coil acquisition, reconstructs with
//! unrolled cascades (CSM-based and CSM-free, optionally with a progressive
//! k-space resolution schedule and row-band sparse attention), trains the
//! cascade denoisers end to end with hand-derived reverse-mode gradients,
//! and ships a benchmark/evaluation harness plus a CLI over all of it.

pub mod acquisition;
pub mod denoiser;
pub mod error;
pub mod fft;
pub mod grid;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod plot;
pub mod rng;
pub mod training;
pub mod unrolled;

pub use error::{Error, Result};
