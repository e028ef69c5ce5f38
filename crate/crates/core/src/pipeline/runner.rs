//! Stage runner behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::stub::StubBackend;
use crate::backend::tiny::TinyBackend;
use crate::backend::{BackendError, ModelBackend};
use crate::corpus::{
    build_synthetic_corpus, load_dataset, split_pool_query, CorpusError, DatasetManifest,
    DemonstrationPair, SyntheticSpec,
};
use crate::generation::{
    assemble_prompt_for_ids, generate_samples, GenerationError, GenerationSample,
};
use crate::metrics::{aggregate_report, render_comparison_table, MetricError, MetricReport, ProblemResult};
use crate::sandbox::{run_batch, CandidateRun, ExecutionOutcome, SandboxError};
use crate::scoring::{score_pool, PoolScores, ScoreCache, ScoringError};
use crate::selection::{
    select_latent, select_random, select_semantic, SelectionError, SelectionResult, Strategy,
};
use crate::training::{
    load_checkpoint, save_checkpoint, train_task_concept, ConceptTokenSet, TrainingConfig,
    TrainingError,
};

use super::config::{BackendConfig, ConceptTaskSpec, DatasetConfig, ExperimentConfig};
use super::manifest::RunManifest;
use super::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl PipelineError {
    /// CLI exit code: 1 config, 3 sandbox infrastructure, 2 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Sandbox(_) => 3,
            _ => 2,
        }
    }
}

/// Loaded dataset split into the demonstration pool and the query set.
pub struct CorpusBundle {
    pub manifest: DatasetManifest,
    pub pool: Vec<DemonstrationPair>,
    pub queries: Vec<DemonstrationPair>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    strategy: Strategy,
    #[serde(flatten)]
    sample: GenerationSample,
}

#[derive(Debug, Serialize, Deserialize)]
struct OutcomeRow {
    strategy: Strategy,
    #[serde(flatten)]
    outcome: ExecutionOutcome,
}

/// A prepared run: validated config bound to a run directory.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub config_digest: String,
    pub run_dir: PathBuf,
}

impl RunContext {
    /// Validate the config and bind (or create) the run directory. A run
    /// directory created for a different config is refused.
    pub fn prepare(
        config: ExperimentConfig,
        run_dir: Option<PathBuf>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let config_digest = config.digest();
        let run_dir = run_dir.unwrap_or_else(|| {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
            PathBuf::from("runs").join(format!("{stamp}-{}", &config_digest[..8]))
        });
        for sub in ["", "checkpoints", "selections"] {
            let dir = run_dir.join(sub);
            fs::create_dir_all(&dir).map_err(|source| PipelineError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }

        let config_path = run_dir.join("config.json");
        if config_path.exists() {
            let existing = ExperimentConfig::from_json(&read(&config_path)?)?;
            if existing.digest() != config_digest {
                return Err(PipelineError::Config(format!(
                    "run dir {} was created for a different config",
                    run_dir.display()
                )));
            }
        } else {
            write(
                &config_path,
                &serde_json::to_string_pretty(&config).expect("config serializes"),
            )?;
        }

        Ok(RunContext {
            config,
            config_digest,
            run_dir,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    pub fn load_corpus(&self) -> Result<CorpusBundle, PipelineError> {
        let manifest = match &self.config.dataset {
            DatasetConfig::File { path, format } => {
                let outcome = load_dataset(path, *format)?;
                for err in &outcome.record_errors {
                    log::warn!("{}: {err}", path.display());
                }
                outcome.manifest
            }
            DatasetConfig::Synthetic {
                families,
                per_family,
            } => build_synthetic_corpus(
                &SyntheticSpec {
                    families: families.clone(),
                    per_family: *per_family,
                },
                derive_seed(self.config.master_seed, "corpus"),
            )?,
        };

        let query_ids: std::collections::BTreeSet<String> =
            if let Some(per_family) = self.config.queries.holdout_per_family {
                if per_family == 0 {
                    return Err(PipelineError::Config(
                        "holdout_per_family must be >= 1".into(),
                    ));
                }
                let mut by_family: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for rec in &manifest.records {
                    let family = crate::corpus::family_of(&rec.task_id)
                        .unwrap_or("unknown")
                        .to_string();
                    by_family.entry(family).or_default().push(rec.task_id.clone());
                }
                let mut ids = std::collections::BTreeSet::new();
                for (family, members) in by_family {
                    if members.len() <= per_family {
                        return Err(PipelineError::Config(format!(
                            "family {family} has {} records, cannot hold out {per_family}",
                            members.len()
                        )));
                    }
                    for id in members.iter().rev().take(per_family) {
                        ids.insert(id.clone());
                    }
                }
                ids
            } else {
                self.config.queries.ids.iter().cloned().collect()
            };

        let (pool, queries) = split_pool_query(&manifest, &query_ids)?;
        if pool.is_empty() {
            return Err(PipelineError::Config(
                "query holdout leaves an empty demonstration pool".into(),
            ));
        }
        Ok(CorpusBundle {
            manifest,
            pool,
            queries,
        })
    }

    /// Construct the frozen backend. The tiny backend is deterministically
    /// rebuilt from its config (and optional pretraining over the pool's
    /// rendered blocks), so its fingerprint is stable across processes.
    pub fn build_backend(
        &self,
        bundle: &CorpusBundle,
    ) -> Result<Box<dyn ModelBackend>, PipelineError> {
        match &self.config.backend {
            BackendConfig::Tiny { model, pretrain } => {
                let mut backend = TinyBackend::new(model.clone())?;
                if let Some(cfg) = pretrain {
                    let texts = crate::generation::pretraining_texts(&bundle.pool);
                    let losses = backend.pretrain_base(&texts, cfg)?;
                    log::info!(
                        "pretrained base model: loss {:.3} -> {:.3}",
                        losses.first().unwrap_or(&f64::NAN),
                        losses.last().unwrap_or(&f64::NAN)
                    );
                }
                Ok(Box::new(backend))
            }
            BackendConfig::Stub { config } => Ok(Box::new(StubBackend::new(config.clone())?)),
        }
    }

    fn concept_tasks(&self, bundle: &CorpusBundle) -> Result<Vec<ConceptTaskSpec>, PipelineError> {
        if !self.config.concept.tasks.is_empty() {
            return Ok(self.config.concept.tasks.clone());
        }
        // Default: one concept per family prefix present in the pool.
        let mut families: Vec<String> = Vec::new();
        for rec in &bundle.pool {
            let family = crate::corpus::family_of(&rec.task_id)
                .unwrap_or("task")
                .to_string();
            if !families.contains(&family) {
                families.push(family);
            }
        }
        Ok(families
            .into_iter()
            .map(|family| ConceptTaskSpec {
                task_id: format!("concept-{family}"),
                member_prefix: Some(format!("{family}-")),
                member_ids: vec![],
            })
            .collect())
    }

    fn members_of<'a>(
        &self,
        spec: &ConceptTaskSpec,
        pool: &'a [DemonstrationPair],
    ) -> Result<Vec<DemonstrationPair>, PipelineError> {
        let members: Vec<DemonstrationPair> = pool
            .iter()
            .filter(|p| {
                spec.member_ids.contains(&p.task_id)
                    || spec
                        .member_prefix
                        .as_deref()
                        .is_some_and(|prefix| p.task_id.starts_with(prefix))
            })
            .cloned()
            .collect();
        if members.is_empty() {
            return Err(PipelineError::Config(format!(
                "concept task {:?} matches no pool records",
                spec.task_id
            )));
        }
        Ok(members)
    }

    fn checkpoint_path(&self, task_id: &str) -> PathBuf {
        self.run_dir
            .join("checkpoints")
            .join(format!("{}.dcpt", sanitize(task_id)))
    }

    fn training_config(&self, seed: u64) -> TrainingConfig {
        let c = &self.config.concept;
        TrainingConfig {
            c: c.c,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            seed,
            early_stop_patience: c.early_stop_patience,
            init: c.init,
        }
    }

    /// Train every configured task concept and write checkpoints plus
    /// training traces. Always retrains; see `ensure_checkpoints` for the
    /// reuse path.
    pub fn cmd_train(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let bundle = self.load_corpus()?;
        let mut backend = self.build_backend(&bundle)?;
        let specs = self.concept_tasks(&bundle)?;

        let mut paths = Vec::new();
        let mut trace_lines = Vec::new();
        for spec in &specs {
            let members = self.members_of(spec, &bundle.pool)?;
            let seed = derive_seed(self.config.master_seed, &format!("train:{}", spec.task_id));
            let cfg = self.training_config(seed);
            let (theta, trace) =
                train_task_concept(backend.as_mut(), &spec.task_id, &members, &cfg)?;
            let path = self.checkpoint_path(&spec.task_id);
            save_checkpoint(backend.as_ref(), &theta, &path)?;
            log::info!(
                "trained {} on {} pairs: loss {:.3} -> {:.3}",
                spec.task_id,
                members.len(),
                trace.losses[0].1,
                trace.final_loss
            );
            trace_lines.push(
                serde_json::json!({
                    "task": spec.task_id,
                    "pairs": members.len(),
                    "losses": trace.losses,
                    "final_loss": trace.final_loss,
                    "wall_time": trace.wall_time,
                })
                .to_string(),
            );
            paths.push(path);
        }
        write(&self.file("traces.jsonl"), &(trace_lines.join("\n") + "\n"))?;

        let mut manifest = self.ensure_manifest(backend.as_ref(), &bundle)?;
        manifest.record_stage(
            "train",
            paths.iter().map(|p| p.display().to_string()).collect(),
        );
        manifest.save(&self.file("manifest.json"))?;
        Ok(paths)
    }

    /// Load existing checkpoints or train the missing ones.
    fn ensure_checkpoints(
        &self,
        backend: &mut dyn ModelBackend,
        bundle: &CorpusBundle,
    ) -> Result<Vec<ConceptTokenSet>, PipelineError> {
        let specs = self.concept_tasks(bundle)?;
        let mut thetas = Vec::new();
        for spec in &specs {
            let path = self.checkpoint_path(&spec.task_id);
            if path.exists() {
                thetas.push(load_checkpoint(backend, &path)?);
                continue;
            }
            let members = self.members_of(spec, &bundle.pool)?;
            let seed = derive_seed(self.config.master_seed, &format!("train:{}", spec.task_id));
            let cfg = self.training_config(seed);
            let (mut theta, _) =
                train_task_concept(backend, &spec.task_id, &members, &cfg)?;
            save_checkpoint(backend, &theta, &path)?;
            theta.checkpoint_ref = Some(path);
            thetas.push(theta);
        }
        Ok(thetas)
    }

    fn score_cache(&self) -> Result<ScoreCache, PipelineError> {
        Ok(ScoreCache::with_file(&self.file("scores.jsonl"))?)
    }

    /// Score the pool (and the queries, for concept assignment) against
    /// every trained concept, persisting into `scores.jsonl`.
    pub fn cmd_score(&self) -> Result<(usize, usize), PipelineError> {
        let bundle = self.load_corpus()?;
        let mut backend = self.build_backend(&bundle)?;
        let thetas = self.ensure_checkpoints(backend.as_mut(), &bundle)?;
        let cache = self.score_cache()?;
        let mode = self.config.selection.score_mode;

        score_pool(backend.as_ref(), &thetas, &bundle.pool, &cache, mode)?;
        if !bundle.queries.is_empty() {
            score_pool(backend.as_ref(), &thetas, &bundle.queries, &cache, mode)?;
        }
        let (hits, misses) = cache.stats();
        log::info!("scoring done: {hits} cache hits, {misses} computed");

        let mut manifest = self.ensure_manifest(backend.as_ref(), &bundle)?;
        manifest.record_stage("score", vec![self.file("scores.jsonl").display().to_string()]);
        manifest.save(&self.file("manifest.json"))?;
        Ok((hits, misses))
    }

    fn selection_path(&self, query_id: &str, strategy: Strategy) -> PathBuf {
        self.run_dir
            .join("selections")
            .join(format!("{}-{}.json", sanitize(query_id), strategy.name()))
    }

    /// Produce selection files for every query under every requested
    /// strategy.
    pub fn cmd_select(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let bundle = self.load_corpus()?;
        if bundle.queries.is_empty() {
            return Err(PipelineError::Config("no queries configured".into()));
        }
        let strategies = self.config.selection.strategy.strategies();
        let k = self.config.selection.k;
        if k > bundle.pool.len().saturating_sub(1) {
            log::warn!(
                "k={k} exceeds the eligible pool size {}; selections will saturate",
                bundle.pool.len()
            );
        }

        // Latent selection needs the backend and scores; the other
        // strategies are pure.
        let latent_inputs = if strategies.contains(&Strategy::Latent) {
            let mut backend = self.build_backend(&bundle)?;
            let thetas = self.ensure_checkpoints(backend.as_mut(), &bundle)?;
            let cache = self.score_cache()?;
            let mode = self.config.selection.score_mode;
            let pool_scores =
                score_pool(backend.as_ref(), &thetas, &bundle.pool, &cache, mode)?;
            let query_scores =
                score_pool(backend.as_ref(), &thetas, &bundle.queries, &cache, mode)?;
            let (hits, misses) = cache.stats();
            log::info!("latent selection scoring: {hits} cache hits, {misses} computed");
            Some((pool_scores, query_scores))
        } else {
            None
        };

        let mut paths = Vec::new();
        for query in &bundle.queries {
            for strategy in &strategies {
                let result = match strategy {
                    Strategy::Semantic => select_semantic(&bundle.pool, query, k)?,
                    Strategy::Random => {
                        let seed = derive_seed(
                            self.config.master_seed,
                            &format!("select:random:{}", query.task_id),
                        );
                        select_random(&bundle.pool, query, k, seed)?
                    }
                    Strategy::Latent => {
                        let (pool_scores, query_scores) =
                            latent_inputs.as_ref().expect("latent inputs prepared");
                        let result = latent_selection_for_query(
                            pool_scores,
                            query_scores,
                            query,
                            k,
                        )?;
                        result
                    }
                };
                let path = self.selection_path(&query.task_id, *strategy);
                write(&path, &serde_json::to_string_pretty(&result).expect("serializes"))?;
                paths.push(path);
            }
        }

        let backend_for_manifest = self.build_backend(&bundle)?;
        let mut manifest = self.ensure_manifest(backend_for_manifest.as_ref(), &bundle)?;
        manifest.record_stage(
            "select",
            paths.iter().map(|p| p.display().to_string()).collect(),
        );
        manifest.save(&self.file("manifest.json"))?;
        Ok(paths)
    }

    fn ensure_selections(
        &self,
        bundle: &CorpusBundle,
    ) -> Result<BTreeMap<(String, Strategy), SelectionResult>, PipelineError> {
        let strategies = self.config.selection.strategy.strategies();
        let missing = bundle.queries.iter().any(|q| {
            strategies
                .iter()
                .any(|s| !self.selection_path(&q.task_id, *s).exists())
        });
        if missing {
            self.cmd_select()?;
        }
        let mut selections = BTreeMap::new();
        for query in &bundle.queries {
            for strategy in &strategies {
                let path = self.selection_path(&query.task_id, *strategy);
                let result: SelectionResult = serde_json::from_str(&read(&path)?)
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
                selections.insert((query.task_id.clone(), *strategy), result);
            }
        }
        Ok(selections)
    }

    /// Assemble prompts and sample candidates for every (query, strategy),
    /// writing `samples.jsonl`.
    pub fn cmd_generate(&self) -> Result<PathBuf, PipelineError> {
        let bundle = self.load_corpus()?;
        let selections = self.ensure_selections(&bundle)?;
        let backend = self.build_backend(&bundle)?;

        let mut lines = Vec::new();
        for ((query_id, strategy), selection) in &selections {
            let query = bundle
                .queries
                .iter()
                .find(|q| &q.task_id == query_id)
                .expect("selection query in bundle");
            let samples = self.generate_for_query(backend.as_ref(), &bundle, selection, query)?;
            for sample in samples {
                let row = SampleRow {
                    strategy: *strategy,
                    sample,
                };
                lines.push(serde_json::to_string(&row).expect("row serializes"));
            }
        }
        let path = self.file("samples.jsonl");
        write(&path, &(lines.join("\n") + "\n"))?;

        let mut manifest = self.ensure_manifest(backend.as_ref(), &bundle)?;
        manifest.record_stage("generate", vec![path.display().to_string()]);
        manifest.save(&self.file("manifest.json"))?;
        Ok(path)
    }

    /// Prompt assembly with the overflow policy: drop the lowest-ranked
    /// selected demonstration and retry until the prompt fits.
    fn generate_for_query(
        &self,
        backend: &dyn ModelBackend,
        bundle: &CorpusBundle,
        selection: &SelectionResult,
        query: &DemonstrationPair,
    ) -> Result<Vec<GenerationSample>, PipelineError> {
        let mut demo_ids = selection.prompt_order();
        let prompt = loop {
            match assemble_prompt_for_ids(
                backend,
                &demo_ids,
                query,
                &bundle.pool,
                self.config.sampling.max_new_tokens,
            ) {
                Ok(prompt) => break prompt,
                Err(GenerationError::PromptOverflow { .. }) if !demo_ids.is_empty() => {
                    let dropped = demo_ids.remove(0);
                    log::warn!(
                        "query {}: prompt overflow, dropping lowest-ranked demo {dropped}",
                        query.task_id
                    );
                }
                Err(other) => return Err(other.into()),
            }
        };
        let seed = derive_seed(
            self.config.master_seed,
            &format!("generate:{}:{}", selection.strategy.name(), query.task_id),
        );
        Ok(generate_samples(
            backend,
            &prompt,
            self.config.n_samples,
            &self.config.sampling,
            seed,
        )?)
    }

    fn ensure_samples(&self, _bundle: &CorpusBundle) -> Result<Vec<SampleRow>, PipelineError> {
        let path = self.file("samples.jsonl");
        if !path.exists() {
            self.cmd_generate()?;
        }
        read_jsonl(&path)
    }

    fn ensure_outcomes(
        &self,
        bundle: &CorpusBundle,
        samples: &[SampleRow],
    ) -> Result<Vec<OutcomeRow>, PipelineError> {
        let path = self.file("outcomes.jsonl");
        if path.exists() {
            return read_jsonl(&path);
        }

        let mut runs = Vec::with_capacity(samples.len());
        let mut strategies = Vec::with_capacity(samples.len());
        for row in samples {
            let query = bundle
                .queries
                .iter()
                .find(|q| q.task_id == row.sample.query_task_id)
                .ok_or_else(|| {
                    PipelineError::Config(format!(
                        "sample references unknown query {:?}",
                        row.sample.query_task_id
                    ))
                })?;
            runs.push(CandidateRun {
                query_task_id: row.sample.query_task_id.clone(),
                sample_index: row.sample.sample_index,
                code: row.sample.extracted_code.clone(),
                tests: query.tests.clone(),
                language_tag: query.language_tag.clone(),
            });
            strategies.push(row.strategy);
        }
        let outcomes = run_batch(
            &runs,
            &self.config.sandbox.policy(),
            self.config.sandbox.parallelism,
        )?;
        let rows: Vec<OutcomeRow> = outcomes
            .into_iter()
            .zip(strategies)
            .map(|(outcome, strategy)| OutcomeRow { strategy, outcome })
            .collect();
        let lines: Vec<String> = rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes"))
            .collect();
        write(&path, &(lines.join("\n") + "\n"))?;
        Ok(rows)
    }

    /// Run the full tail of the pipeline (reusing cached artifacts) and
    /// emit per-strategy metric reports plus the rendered table.
    pub fn cmd_evaluate(&self) -> Result<Vec<MetricReport>, PipelineError> {
        let bundle = self.load_corpus()?;
        let samples = self.ensure_samples(&bundle)?;
        let outcomes = self.ensure_outcomes(&bundle, &samples)?;

        let mut reports = Vec::new();
        for strategy in self.config.selection.strategy.strategies() {
            let mut results = Vec::new();
            for query in &bundle.queries {
                let query_outcomes: Vec<ExecutionOutcome> = outcomes
                    .iter()
                    .filter(|r| {
                        r.strategy == strategy && r.outcome.query_task_id == query.task_id
                    })
                    .map(|r| r.outcome.clone())
                    .collect();
                if query_outcomes.is_empty() {
                    continue;
                }
                let mut codes = vec![String::new(); query_outcomes.len()];
                for row in &samples {
                    if row.strategy == strategy && row.sample.query_task_id == query.task_id {
                        if let Some(slot) = codes.get_mut(row.sample.sample_index) {
                            *slot = row.sample.extracted_code.clone();
                        }
                    }
                }
                results.push(ProblemResult::new(
                    &query.task_id,
                    query_outcomes,
                    &codes,
                    &query.golden_code,
                )?);
            }
            reports.push(aggregate_report(
                &bundle.manifest.name,
                strategy.name(),
                &self.config_digest,
                &results,
                &self.config.metrics,
            )?);
        }

        write(
            &self.file("report.json"),
            &serde_json::to_string_pretty(&reports).expect("reports serialize"),
        )?;
        let table = render_comparison_table(
            &bundle.manifest.name,
            &reports.iter().collect::<Vec<_>>(),
        );
        write(&self.file("report.txt"), &table)?;

        let backend = self.build_backend(&bundle)?;
        let mut manifest = self.ensure_manifest(backend.as_ref(), &bundle)?;
        manifest.record_stage(
            "evaluate",
            vec![
                self.file("report.json").display().to_string(),
                self.file("report.txt").display().to_string(),
            ],
        );
        manifest.save(&self.file("manifest.json"))?;
        Ok(reports)
    }

    /// Render the comparison table from the persisted report, evaluating
    /// first if needed.
    pub fn cmd_report(&self) -> Result<String, PipelineError> {
        let path = self.file("report.json");
        if !path.exists() {
            self.cmd_evaluate()?;
        }
        let reports: Vec<MetricReport> = serde_json::from_str(&read(&path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let dataset = reports
            .first()
            .map(|r| r.dataset.clone())
            .unwrap_or_else(|| "dataset".into());
        let table = render_comparison_table(&dataset, &reports.iter().collect::<Vec<_>>());
        write(&self.file("report.txt"), &table)?;
        Ok(table)
    }

    fn ensure_manifest(
        &self,
        backend: &dyn ModelBackend,
        bundle: &CorpusBundle,
    ) -> Result<RunManifest, PipelineError> {
        let path = self.file("manifest.json");
        if path.exists() {
            RunManifest::load(&path)
        } else {
            Ok(RunManifest::new(
                &self.config_digest,
                backend.descriptor(),
                &bundle.manifest.content_hash,
            ))
        }
    }
}

/// Query-conditioned latent selection: assign the query to its best
/// concept, then rank the pool by score under that concept.
pub fn latent_selection_for_query(
    pool_scores: &PoolScores,
    query_scores: &PoolScores,
    query: &DemonstrationPair,
    k: usize,
) -> Result<SelectionResult, PipelineError> {
    let qi = query_scores
        .demo_ids
        .iter()
        .position(|id| id == &query.task_id)
        .ok_or_else(|| {
            PipelineError::Config(format!("query {:?} was never scored", query.task_id))
        })?;
    let (assigned, _) = query_scores.best_for_demo(qi).ok_or_else(|| {
        PipelineError::Scoring(ScoringError::UnscoreableQuery(query.task_id.clone()))
    })?;
    let demo_scores = pool_scores
        .scores_under(&assigned)
        .expect("assigned concept exists in pool scores");
    Ok(select_latent(&demo_scores, query, k)?)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, content: &str) -> Result<(), PipelineError> {
    fs::write(path, content).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(line).map_err(|e| {
            PipelineError::Config(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}
