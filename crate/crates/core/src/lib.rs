//! Ghost-free multi-exposure fusion for hand-held camera stacks.
//!
//! The pipeline aligns every input to a reference exposure with dense
//! optical flow, detects misregistered superpixels from per-region flow
//! variance, re-synthesizes those regions with a windowed PatchMatch
//! against an exposure-adjusted reference, and fuses the aligned stack
//! with Laplacian-pyramid exposure fusion. A Piella Q_S metric harness
//! scores results objectively.

pub mod error;
pub mod error_detect;
pub mod fixtures;
pub mod flow;
pub mod fusion;
pub mod image;
pub mod imf;
mod kernels;
pub mod metrics;
pub mod patchmatch;
pub mod pipeline;
pub mod superpixel;

pub use error::{Error, Result};
pub use image::{ExposureStack, ImageF};
