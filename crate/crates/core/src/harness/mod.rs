//! Dataset ingestion, experiment orchestration, and report emission.

pub mod experiment;
pub mod manifest;
pub mod report;
pub mod toy;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, Stage};
pub use manifest::{extract_patches, ingest, DatasetManifest, IngestConfig, Split};
pub use report::{emit_report, ExperimentReport};
