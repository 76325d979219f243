//! Interactive image-captioning adaptation.
//!
//! A toy-scale attention captioner whose predictions are corrected by users,
//! corrections expanded by text/image/joint augmentation, and folded back into
//! the model with step-wise updates guarded by sparse episodic replay.

pub mod augment;
pub mod captioner;
pub mod continual;
pub mod dataset;
mod error;
pub mod feedback;
pub mod metrics;
pub mod sim;
pub mod split;
pub mod text;

pub use error::{Error, Result};
