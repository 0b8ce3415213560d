//! Few-shot video recognition over precomputed two-stream (RGB + depth)
//! frame features.
//!
//! The pipeline samples clips from each video, fuses the RGB and depth
//! streams with a depth-guided adaptive instance normalization module, and
//! classifies a query video against cosine-scored class prototypes. Training
//! is episodic with hand-derived gradients and SGD with momentum.

pub mod classifier;
pub mod dgadain;
pub mod error;
pub mod evaluator;
pub mod featurestore;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
