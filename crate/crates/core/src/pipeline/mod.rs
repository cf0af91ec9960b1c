//! End-to-end workflow: phantom fixtures, correction, evaluation, blinded montages,
//! the rating service and rank statistics.

mod config;
pub mod fsl;
pub mod montage;
mod run;
pub mod serve;

pub use config::{Method, MetricOptions, PipelineConfig, SubjectInputs, UNCORRECTED};
pub use montage::{cmd_montage, cmd_render_montage, RatingSession};
pub use run::*;
pub use serve::cmd_serve;
