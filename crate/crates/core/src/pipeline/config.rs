//! Experiment configuration: everything a run needs, validated before any
//! expensive stage starts.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::stub::StubConfig;
use crate::backend::tiny::{PretrainConfig, TinyConfig};
use crate::backend::SamplingConfig;
use crate::corpus::{SourceFormat, TaskFamily};
use crate::metrics::MetricRequest;
use crate::scoring::ScoreMode;

use super::runner::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    /// A benchmark file on disk.
    File { path: PathBuf, format: SourceFormat },
    /// A generated synthetic corpus (seeded from the master seed).
    Synthetic {
        families: Vec<TaskFamily>,
        per_family: usize,
    },
}

/// Which records are held out as queries. Exactly one selector must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QueryConfig {
    /// Explicit task ids.
    #[serde(default)]
    pub ids: Vec<String>,
    /// Hold out the last N records of every family prefix.
    #[serde(default)]
    pub holdout_per_family: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// The small causal transformer, optionally pretrained on the pool's
    /// rendered demonstration blocks before freezing.
    Tiny {
        #[serde(flatten)]
        model: TinyConfig,
        #[serde(default)]
        pretrain: Option<PretrainConfig>,
    },
    /// The declared-distribution stub.
    Stub { config: StubConfig },
}

/// One task concept to train: its members are the pool records matching
/// `member_prefix` or listed in `member_ids`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptTaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub member_prefix: Option<String>,
    #[serde(default)]
    pub member_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptConfig {
    pub c: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default = "default_init")]
    pub init: crate::backend::InitRule,
    /// Empty means one concept per family prefix found in the pool.
    #[serde(default)]
    pub tasks: Vec<ConceptTaskSpec>,
}

fn default_init() -> crate::backend::InitRule {
    crate::backend::InitRule::CopyVocabRow
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyChoice {
    Latent,
    Semantic,
    Random,
    All,
}

impl StrategyChoice {
    pub fn strategies(&self) -> Vec<crate::selection::Strategy> {
        use crate::selection::Strategy;
        match self {
            StrategyChoice::Latent => vec![Strategy::Latent],
            StrategyChoice::Semantic => vec![Strategy::Semantic],
            StrategyChoice::Random => vec![Strategy::Random],
            StrategyChoice::All => {
                vec![Strategy::Semantic, Strategy::Latent, Strategy::Random]
            }
        }
    }
}

impl std::str::FromStr for StrategyChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "latent" => Ok(StrategyChoice::Latent),
            "semantic" => Ok(StrategyChoice::Semantic),
            "random" => Ok(StrategyChoice::Random),
            "all" => Ok(StrategyChoice::All),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

fn default_score_mode() -> ScoreMode {
    ScoreMode::LikelihoodRatio
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: StrategyChoice,
    pub k: usize,
    /// Scoring route feeding latent selection.
    #[serde(default = "default_score_mode")]
    pub score_mode: ScoreMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub timeout_secs: f64,
    pub memory_cap_mib: u64,
    pub parallelism: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            timeout_secs: 10.0,
            memory_cap_mib: 512,
            parallelism: 4,
        }
    }
}

impl SandboxConfig {
    pub fn policy(&self) -> crate::sandbox::SandboxPolicy {
        crate::sandbox::SandboxPolicy {
            timeout: std::time::Duration::from_secs_f64(self.timeout_secs),
            memory_cap_bytes: self.memory_cap_mib * 1024 * 1024,
            allow_network: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub queries: QueryConfig,
    pub backend: BackendConfig,
    pub concept: ConceptConfig,
    pub selection: SelectionConfig,
    pub sampling: SamplingConfig,
    pub n_samples: usize,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    pub metrics: Vec<MetricRequest>,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(json: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(json).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Digest over the canonical JSON encoding; names the run directory and
    /// is stamped into every report.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Fail-fast validation of every cross-field invariant that does not
    /// need the dataset loaded.
    pub fn validate(&self) -> Result<(), PipelineError> {
        match &self.dataset {
            DatasetConfig::File { path, .. } => {
                if !path.exists() {
                    return Err(PipelineError::Config(format!(
                        "dataset file {} does not exist",
                        path.display()
                    )));
                }
            }
            DatasetConfig::Synthetic {
                families,
                per_family,
            } => {
                let distinct: BTreeSet<&str> = families.iter().map(|f| f.slug()).collect();
                if distinct.len() < 2 || *per_family == 0 {
                    return Err(PipelineError::Config(
                        "synthetic dataset needs >= 2 distinct families and per_family >= 1"
                            .into(),
                    ));
                }
            }
        }

        let explicit = !self.queries.ids.is_empty();
        let holdout = self.queries.holdout_per_family.is_some();
        if explicit == holdout {
            return Err(PipelineError::Config(
                "set exactly one of queries.ids or queries.holdout_per_family".into(),
            ));
        }

        if self.concept.c == 0
            || self.concept.batch_size == 0
            || self.concept.learning_rate <= 0.0
        {
            return Err(PipelineError::Config(
                "concept config needs c >= 1, batch_size >= 1, learning_rate > 0".into(),
            ));
        }

        if self.selection.k == 0 {
            return Err(PipelineError::Config("selection.k must be >= 1".into()));
        }
        if self.n_samples == 0 {
            return Err(PipelineError::Config("n_samples must be >= 1".into()));
        }
        if self.metrics.is_empty() {
            return Err(PipelineError::Config(
                "at least one (metric, k) request is required".into(),
            ));
        }
        let max_k = self.metrics.iter().map(|m| m.k).max().unwrap_or(0);
        if self.n_samples < max_k {
            return Err(PipelineError::Config(format!(
                "n_samples ({}) must be >= the largest requested metric k ({max_k})",
                self.n_samples
            )));
        }

        self.sampling
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;

        if self.sandbox.timeout_secs <= 0.0
            || self.sandbox.memory_cap_mib == 0
            || self.sandbox.parallelism == 0
        {
            return Err(PipelineError::Config(
                "sandbox needs timeout > 0, memory cap > 0, parallelism >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricKind;

    fn base_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                families: vec![TaskFamily::ReverseString, TaskFamily::AddIntegers],
                per_family: 5,
            },
            queries: QueryConfig {
                ids: vec![],
                holdout_per_family: Some(1),
            },
            backend: BackendConfig::Tiny {
                model: TinyConfig::default(),
                pretrain: None,
            },
            concept: ConceptConfig {
                c: 4,
                epochs: 1,
                learning_rate: 0.1,
                batch_size: 2,
                early_stop_patience: None,
                init: crate::backend::InitRule::CopyVocabRow,
                tasks: vec![],
            },
            selection: SelectionConfig {
                strategy: StrategyChoice::All,
                k: 2,
                score_mode: ScoreMode::LikelihoodRatio,
            },
            sampling: SamplingConfig::default(),
            n_samples: 3,
            sandbox: SandboxConfig::default(),
            metrics: vec![MetricRequest {
                kind: MetricKind::Pass,
                k: 1,
            }],
            master_seed: 7,
        }
    }

    #[test]
    fn valid_config_passes_and_digests_stably() {
        let config = base_config();
        config.validate().unwrap();
        assert_eq!(config.digest(), config.digest());
    }

    #[test]
    fn n_samples_must_cover_requested_k() {
        let mut config = base_config();
        config.metrics = vec![MetricRequest {
            kind: MetricKind::Pass,
            k: 10,
        }];
        assert!(matches!(
            config.validate(),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn missing_dataset_path_fails_fast() {
        let mut config = base_config();
        config.dataset = DatasetConfig::File {
            path: PathBuf::from("/no/such/file.jsonl"),
            format: SourceFormat::Native,
        };
        assert!(matches!(config.validate(), Err(PipelineError::Config(_))));
    }

    #[test]
    fn queries_need_exactly_one_selector() {
        let mut config = base_config();
        config.queries = QueryConfig::default();
        assert!(config.validate().is_err());
        config.queries = QueryConfig {
            ids: vec!["a".into()],
            holdout_per_family: Some(1),
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let config = base_config();
        let json = serde_json::to_string(&config).unwrap();
        let back = ExperimentConfig::from_json(&json).unwrap();
        assert_eq!(config.digest(), back.digest());
    }
}
