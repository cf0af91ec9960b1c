//! Reversed-polarity EPI distortion correction for spinal cord diffusion MRI,
//! with tensor fitting and centerline-relative alignment metrics.

pub mod centerline;
pub mod correct;
pub mod error;
pub mod nifti;
pub mod phantom;
pub mod pipeline;
pub mod sim;
pub mod similarity;
pub mod stats;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
