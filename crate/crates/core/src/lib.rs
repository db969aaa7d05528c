//! Blind single-image deblurring.
//!
//! The pipeline has two stages. A per-image adversarial estimator recovers
//! the blur kernel of a blurred photo ([`estimator`]), and a
//! kernel-conditioned restoration network ([`net`]) turns the blurred image
//! and that kernel into a sharp estimate. Around them sit the degradation
//! model and dataset generator, reference metrics, and a training and
//! evaluation harness.

pub mod dataset;
pub mod degradation;
pub mod error;
pub mod estimator;
pub mod harness;
mod fourier;
pub mod image;
pub mod kernel;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod synthetic;

pub use error::{Error, Result};
