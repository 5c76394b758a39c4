//! Spatiotemporal volume forecasting with a learned wavefunction.
//!
//! A short history of frames is encoded into amplitude, phase and potential
//! fields. The wavefunction `ψ = A·e^{iΦ}` is evolved under `H = -½∇² + V`
//! with an unrolled explicit predictor–corrector scheme, and the normalized
//! intensity `|ψ|²` is the forecast of the next frame.

pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod physics;
pub mod rng;
pub mod synthgen;
pub mod train;
pub mod tensor;
pub mod vf1;

pub use error::{Error, Result};
pub use tensor::{Boundary, ComplexField, GridSpec, RealField};
