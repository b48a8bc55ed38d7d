//! Hierarchical part-whole message passing for generative 3D part assembly.
//!
//! The crate is organized as:
//! - [`geom`]: pure geometry kernels (Chamfer, FPS, PCA, quaternions, rigid transforms)
//! - [`hierarchy`]: unsupervised super-part construction
//! - [`autodiff`]: dense-tensor reverse-mode autodiff engine and AdamW
//! - [`model`]: the two-stage super-part / part encoder network
//! - [`train`]: losses, Min-of-N objective, and the training loop
//! - [`metrics`]: assembly quality and diversity metrics
//! - [`data`]: shape file format, preprocessing, synthetic generator, exports

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geom;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
