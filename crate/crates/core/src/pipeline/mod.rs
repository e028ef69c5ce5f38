//! Experiment orchestration: reproducible runs behind the CLI subcommands.
//!
//! A run lives in its own directory (`runs/<timestamp>-<digest>/` by
//! default) holding `manifest.json`, `checkpoints/`, `scores.jsonl`,
//! `selections/`, `samples.jsonl`, `outcomes.jsonl`, and `report.json`, so
//! every reported number is re-derivable from on-disk artifacts. Stages are
//! resumable: artifacts that already exist are reused.

mod config;
mod manifest;
mod runner;
mod seeds;

pub use config::{
    BackendConfig, ConceptConfig, ConceptTaskSpec, DatasetConfig, ExperimentConfig,
    QueryConfig, SandboxConfig, SelectionConfig, StrategyChoice,
};
pub use manifest::{RunManifest, StageRecord};
pub use runner::{latent_selection_for_query, PipelineError, RunContext};
pub use seeds::derive_seed;
