//! Multi-tissue glomerular-structure segmentation with a single network: a
//! residual U-Net backbone, a task- and scale-conditioned controller that
//! generates the weights of a small dynamic head, and a partial-label
//! training loop.
//!
//! Built with the `parallel` feature (default), batch samples, evaluation
//! images and augmentation run on rayon; without it everything runs
//! sequentially with identical results.

pub mod backbone;
pub mod dataio;
pub mod datamodel;
pub mod dynamic_head;
pub mod error;
pub mod losses_metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{ModelConfig, OmniSeg};
