//! Black-box DNN watermarking with trigger samples built from Fourier-sensitivity analysis.
//!
//! The pipeline runs in four stages:
//!
//! 1. train a non-marked classifier ([`nn`]) on a [`data::DatasetBundle`];
//! 2. measure how its test error responds to single-frequency perturbations
//!    ([`heatmap`]) and pick the mid-low sensitive frequencies ([`clustering`]);
//! 3. perturb clean samples at those frequencies with a keyed, shared perturbation
//!    ([`trigger`]) and train a marked model that maps them to a new class ([`watermark`]);
//! 4. verify ownership by querying a suspect model on held-out triggers, optionally after
//!    attacking the model or the triggers ([`attacks`]).
//!
//! Data-parallel sweeps (heat maps, batch evaluation, trigger generation) use rayon when the
//! `parallel` feature is enabled and fall back to sequential iteration otherwise. Results are
//! identical either way because all randomness is keyed by position or sample, never by
//! schedule.

pub mod attacks;
pub mod clustering;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod spectral;
pub mod tensor;
pub mod trigger;
pub mod watermark;

pub use error::{Error, Result};
pub use image::Image;
