//! Config-driven experiment pipeline.

pub mod backbone;
pub mod config;
pub mod pipeline;

pub use backbone::{build_vocabulary, pretrain_backbone, pretrain_inputs};
pub use config::{BackboneConfig, CorpusConfig, EvalConfig, PlanConfig, PretrainConfig, RunConfig};
pub use pipeline::{
    cmd_compare, cmd_evaluate, cmd_prepare, cmd_report, cmd_run, ArtifactLayout,
    ExperimentManifest, Overrides, RunArtifacts, RunScores,
};
