pub mod config;
pub mod error;
pub mod io;
pub mod stages;
pub mod synth;

pub use config::{Overrides, Pipeline, PipelineConfig};
pub use error::CliError;
pub use stages::StageReport;
