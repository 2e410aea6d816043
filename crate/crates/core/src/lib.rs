//! Self-supervised dual-stream representation learning for tri-axial
//! accelerometer windows: a time-domain signal learner and a Morlet
//! scalogram learner, trained contrastively, fine-tuned for activity
//! recognition and fused.

pub mod augment;
pub mod config;
pub mod contrastive;
pub mod dataio;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod wavelet;

pub use error::{Error, ErrorClass, Result};
