//! Command-line pipeline around `relbias-core`: configuration, provenance
//! stamps, the staged run with its prior cache, and report diffs.

pub mod config;
pub mod pipeline;
pub mod provenance;
pub mod report;

pub use config::{PipelineConfig, TargetSpec, TauSetting};
pub use pipeline::{run_pipeline, PipelineError, PipelineOutcome, Stage, StageError};
pub use report::{diff_reports, read_report, ReportFile};
