//! Unsupervised anomaly detection for structured grayscale images.
//!
//! The pipeline reconstructs images through a patch encoder, a pair of
//! teacher/student decoders, a space-aware memory of learned normal patterns,
//! and a feature in-painting block; a lightweight adversarial discriminator
//! turns reconstruction quality into an anomaly score. Everything runs on a
//! self-contained f64 reverse-mode autodiff engine so gradients are exact and
//! finite-difference checkable.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inpaint;
pub mod layers;
pub mod memory;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod par;
pub mod params;
pub mod plot;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Result, SimsidError};
pub use tensor::Tensor;
