//! Local second-opinion pipeline for chest-X-ray-style images: an
//! out-of-distribution gate, a multi-label classifier with calibrated
//! probabilities, and gradient/CAM explanations, all on a small in-repo
//! inference engine.

pub mod bundle;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod explain;
pub mod models;
pub mod ood;
pub mod preprocess;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
