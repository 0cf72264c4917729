//! Experiment driver: configuration schema and the four pipeline stages.

pub mod config;
pub mod stages;

pub use config::{
    DatasetConfig, ExperimentSection, MetricsSection, ModelSection, OutputSection, RunConfig,
    TrainSection,
};
pub use stages::{
    load_pipeline_inputs, run_evaluate, run_fit_density, run_synth, run_train, synth_schema,
    FitDensitySummary, OutputLayout, PipelineInputs, TrainManifest, TrainStageSummary,
};
