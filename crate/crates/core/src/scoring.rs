//! Task-concept scoring of candidate demonstrations.
//!
//! Two routes compute how strongly a demonstration aligns with a task
//! concept, both with the model in a purely evaluative role:
//!
//! * [`score_demonstration`] appends the concept tokens after the rendered
//!   demonstration and sums their log-probabilities — the model emits the
//!   concept posterior directly.
//! * [`score_demonstration_likelihood`] applies Bayes' rule with a uniform
//!   prior over tasks: the posterior is, up to a task-independent constant,
//!   the likelihood ratio `log P(solution | concept, problem) -
//!   log P(solution | problem)`. This measures exactly the quantity concept
//!   training optimizes and is the score the pipeline ranks with; the
//!   direct posterior of rare added tokens is too noisy on desk-scale
//!   models to separate task families.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, Segment, TokenSequence};
use crate::corpus::DemonstrationPair;
use crate::generation::{problem_block, solution_block};
use crate::selection::DemoScore;
use crate::training::{checkpoint_digest, ConceptTokenSet, TrainingError};

/// Log posterior of one task concept given one demonstration, computed as
/// the summed log-probability of the appended concept tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    /// Task id of the scoring concept.
    pub task_id: String,
    pub demo_task_id: String,
    /// Sum of `per_token_logprobs`, exactly.
    pub log_posterior: f64,
    pub per_token_logprobs: Vec<f64>,
}

/// Bayes-route concept score: conditional and marginal log-likelihood of
/// the rendered solution, whose difference ranks demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodScore {
    pub task_id: String,
    pub demo_task_id: String,
    /// `log P(solution tokens | concept, problem)`.
    pub log_conditional: f64,
    /// `log P(solution tokens | problem)` under the bare model.
    pub log_marginal: f64,
}

impl LikelihoodScore {
    pub fn log_ratio(&self) -> f64 {
        self.log_conditional - self.log_marginal
    }
}

/// Which scoring route fills a score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Appended-concept posterior ([`score_demonstration`]).
    Posterior,
    /// Bayes likelihood ratio ([`score_demonstration_likelihood`]).
    LikelihoodRatio,
}

impl ScoreMode {
    fn tag(&self) -> &'static str {
        match self {
            ScoreMode::Posterior => "posterior",
            ScoreMode::LikelihoodRatio => "likelihood_ratio",
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("no concept token sets to score against")]
    NoThetas,
    #[error("demonstration pool is empty")]
    EmptyPool,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Checkpoint(#[from] TrainingError),
    #[error("score cache io {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("query {0:?} could not be scored against any concept")]
    UnscoreableQuery(String),
}

/// Build the scoring sequence `[rendered X][rendered Y][concept tokens]`:
/// the concept sits in the predicted-last position, giving its posterior
/// given the demonstration.
pub fn assemble_scoring_sequence(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
    pair: &DemonstrationPair,
) -> Result<TokenSequence, BackendError> {
    let input = backend.tokenize(&problem_block(&pair.prompt_text))?;
    let output = backend.tokenize(&solution_block(&pair.golden_code))?;
    let total = input.len() + output.len() + theta.token_ids.len();
    if total > backend.context_budget() {
        return Err(BackendError::ContextOverflow {
            length: total,
            budget: backend.context_budget(),
        });
    }
    let mut seq = TokenSequence::new();
    for &id in &input.token_ids {
        seq.push(id, Segment::Input);
    }
    for &id in &output.token_ids {
        seq.push(id, Segment::Output);
    }
    for &id in &theta.token_ids {
        seq.push(id, Segment::Concept);
    }
    Ok(seq)
}

/// Score one demonstration against one task concept via the appended
/// concept posterior. No parameters change.
pub fn score_demonstration(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
    pair: &DemonstrationPair,
) -> Result<ConceptScore, ScoringError> {
    let seq = assemble_scoring_sequence(backend, theta, pair)?;
    let logprobs = backend.sequence_logprobs(&seq)?;
    let c = theta.token_ids.len();
    // logprobs covers positions 1..len; the final c entries belong to the
    // concept tokens.
    let per_token_logprobs: Vec<f64> = logprobs[logprobs.len() - c..].to_vec();
    let log_posterior: f64 = per_token_logprobs.iter().sum();
    Ok(ConceptScore {
        task_id: theta.task_id.clone(),
        demo_task_id: pair.task_id.clone(),
        log_posterior,
        per_token_logprobs,
    })
}

/// Score one demonstration via the Bayes route: how much more likely the
/// rendered solution becomes when the concept tokens precede the problem.
pub fn score_demonstration_likelihood(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
    pair: &DemonstrationPair,
) -> Result<LikelihoodScore, ScoringError> {
    let input = backend.tokenize(&problem_block(&pair.prompt_text))?;
    let output = backend.tokenize(&solution_block(&pair.golden_code))?;
    let nx = input.len();
    let ny = output.len();
    let total = theta.token_ids.len() + nx + ny;
    if total > backend.context_budget() {
        return Err(ScoringError::Backend(BackendError::ContextOverflow {
            length: total,
            budget: backend.context_budget(),
        }));
    }

    let mut content = TokenSequence::new();
    for &id in &input.token_ids {
        content.push(id, Segment::Input);
    }
    for &id in &output.token_ids {
        content.push(id, Segment::Output);
    }

    // Output tokens occupy positions nx..nx+ny; logprob entry i-1 covers
    // position i.
    let marginal_lps = backend.sequence_logprobs(&content)?;
    let log_marginal: f64 = marginal_lps[nx - 1..nx - 1 + ny].iter().sum();

    let mut conditional = TokenSequence::from_ids(theta.token_ids.clone(), Segment::Concept);
    conditional.append(&content);
    let c = theta.token_ids.len();
    let conditional_lps = backend.sequence_logprobs(&conditional)?;
    let log_conditional: f64 = conditional_lps[c + nx - 1..c + nx - 1 + ny].iter().sum();

    Ok(LikelihoodScore {
        task_id: theta.task_id.clone(),
        demo_task_id: pair.task_id.clone(),
        log_conditional,
        log_marginal,
    })
}

/// One scored cell of the score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolScore {
    pub task_id: String,
    pub demo_task_id: String,
    /// Ranking value: log posterior or log likelihood-ratio per the mode.
    pub value: f64,
    /// Route-specific detail: per-token log-probs (posterior mode) or
    /// `[log_conditional, log_marginal]` (likelihood-ratio mode).
    pub components: Vec<f64>,
}

/// One cell of the score matrix: a real score or an explicit sentinel for
/// a demonstration that could not be scored. Never a fake number.
#[derive(Debug, Clone)]
pub enum ScoreEntry {
    Scored(PoolScore),
    Unscoreable {
        task_id: String,
        demo_task_id: String,
        reason: String,
    },
}

impl ScoreEntry {
    pub fn score(&self) -> Option<f64> {
        match self {
            ScoreEntry::Scored(s) => Some(s.value),
            ScoreEntry::Unscoreable { .. } => None,
        }
    }
}

/// Score matrix over (concept, demonstration) pairs.
#[derive(Debug)]
pub struct PoolScores {
    pub mode: ScoreMode,
    pub theta_ids: Vec<String>,
    pub demo_ids: Vec<String>,
    /// `entries[theta_index][demo_index]`.
    pub entries: Vec<Vec<ScoreEntry>>,
}

impl PoolScores {
    /// Per-demo scores under one concept, in pool order; input shape for
    /// latent selection.
    pub fn scores_under(&self, theta_id: &str) -> Option<Vec<DemoScore>> {
        let ti = self.theta_ids.iter().position(|t| t == theta_id)?;
        Some(
            self.entries[ti]
                .iter()
                .enumerate()
                .map(|(di, entry)| DemoScore {
                    demo_task_id: self.demo_ids[di].clone(),
                    score: entry.score(),
                })
                .collect(),
        )
    }

    /// The best concept for one demo: maximum score across concepts, ties
    /// broken by ascending concept task_id.
    pub fn best_for_demo(&self, demo_index: usize) -> Option<(String, f64)> {
        let per_theta: Vec<(String, Option<f64>)> = self
            .theta_ids
            .iter()
            .enumerate()
            .map(|(ti, id)| (id.clone(), self.entries[ti][demo_index].score()))
            .collect();
        best_concept_score(&per_theta)
    }
}

/// Maximize the score over concepts for one demonstration. Returns `None`
/// when every entry is a sentinel (the demo is excluded from selection).
/// Ties break by ascending concept task_id.
pub fn best_concept_score(scores: &[(String, Option<f64>)]) -> Option<(String, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for (task_id, score) in scores {
        let Some(score) = score else { continue };
        best = match best {
            None => Some((task_id, *score)),
            Some((bid, bscore)) => {
                if *score > bscore || (*score == bscore && task_id.as_str() < bid) {
                    Some((task_id, *score))
                } else {
                    Some((bid, bscore))
                }
            }
        };
    }
    best.map(|(id, s)| (id.to_string(), s))
}

/// JSONL row of the persisted score cache.
#[derive(Debug, Serialize, Deserialize)]
struct CacheRow {
    theta: String,
    demo: String,
    checkpoint_digest: String,
    model_fingerprint: String,
    /// The ranking value; for likelihood-ratio rows this is the log ratio.
    log_posterior: f64,
    per_token: Vec<f64>,
    /// Content hash of the demonstration; lookups are content-addressed so
    /// a renamed or edited demo never reuses a stale score.
    demo_hash: String,
    #[serde(default = "default_mode_tag")]
    mode: String,
}

fn default_mode_tag() -> String {
    "posterior".into()
}

type CacheKey = (String, String, String, &'static str);

/// Content-addressed score cache with optional JSONL persistence.
/// Concurrent readers share the map; writers are serialized.
pub struct ScoreCache {
    entries: RwLock<HashMap<CacheKey, PoolScore>>,
    path: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        ScoreCache {
            entries: RwLock::new(HashMap::new()),
            path: None,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    /// Open a file-backed cache, loading any existing rows. Malformed rows
    /// are skipped with a diagnostic.
    pub fn with_file(path: &Path) -> Result<Self, ScoringError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|source| ScoringError::CacheIo {
                path: path.display().to_string(),
                source,
            })?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRow>(line) {
                    Ok(row) => {
                        let mode = match row.mode.as_str() {
                            "posterior" => ScoreMode::Posterior.tag(),
                            "likelihood_ratio" => ScoreMode::LikelihoodRatio.tag(),
                            other => {
                                log::warn!(
                                    "{}: unknown score mode {other:?} at line {}",
                                    path.display(),
                                    lineno + 1
                                );
                                continue;
                            }
                        };
                        entries.insert(
                            (
                                row.model_fingerprint.clone(),
                                row.checkpoint_digest.clone(),
                                row.demo_hash.clone(),
                                mode,
                            ),
                            PoolScore {
                                task_id: row.theta,
                                demo_task_id: row.demo,
                                value: row.log_posterior,
                                components: row.per_token,
                            },
                        );
                    }
                    Err(e) => log::warn!(
                        "{}: skipping malformed cache row at line {}: {e}",
                        path.display(),
                        lineno + 1
                    ),
                }
            }
        }
        Ok(ScoreCache {
            entries: RwLock::new(entries),
            path: Some(path.to_path_buf()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    fn get(&self, key: &CacheKey) -> Option<PoolScore> {
        let found = self.entries.read().expect("cache lock").get(key).cloned();
        match &found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    fn insert(&self, key: CacheKey, score: &PoolScore) -> Result<(), ScoringError> {
        if let Some(path) = &self.path {
            let row = CacheRow {
                theta: score.task_id.clone(),
                demo: score.demo_task_id.clone(),
                checkpoint_digest: key.1.clone(),
                model_fingerprint: key.0.clone(),
                log_posterior: score.value,
                per_token: score.components.clone(),
                demo_hash: key.2.clone(),
                mode: key.3.to_string(),
            };
            let line = serde_json::to_string(&row).expect("row serializes");
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| ScoringError::CacheIo {
                    path: path.display().to_string(),
                    source,
                })?;
            writeln!(file, "{line}").map_err(|source| ScoringError::CacheIo {
                path: path.display().to_string(),
                source,
            })?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key, score.clone());
        Ok(())
    }

    /// (hits, misses) since construction. A pass with zero misses made no
    /// backend scoring calls.
    pub fn stats(&self) -> (usize, usize) {
        (
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
        )
    }
}

fn compute_score(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
    pair: &DemonstrationPair,
    mode: ScoreMode,
) -> Result<PoolScore, ScoringError> {
    match mode {
        ScoreMode::Posterior => {
            let s = score_demonstration(backend, theta, pair)?;
            Ok(PoolScore {
                task_id: s.task_id,
                demo_task_id: s.demo_task_id,
                value: s.log_posterior,
                components: s.per_token_logprobs,
            })
        }
        ScoreMode::LikelihoodRatio => {
            let s = score_demonstration_likelihood(backend, theta, pair)?;
            Ok(PoolScore {
                task_id: s.task_id.clone(),
                demo_task_id: s.demo_task_id.clone(),
                value: s.log_ratio(),
                components: vec![s.log_conditional, s.log_marginal],
            })
        }
    }
}

/// Score every (concept, demonstration) pair, serving repeats from the
/// cache. Demonstrations that cannot be scored get an explicit sentinel.
pub fn score_pool(
    backend: &dyn ModelBackend,
    thetas: &[ConceptTokenSet],
    pool: &[DemonstrationPair],
    cache: &ScoreCache,
    mode: ScoreMode,
) -> Result<PoolScores, ScoringError> {
    if thetas.is_empty() {
        return Err(ScoringError::NoThetas);
    }
    if pool.is_empty() {
        return Err(ScoringError::EmptyPool);
    }
    let fingerprint = backend.descriptor().model_fingerprint;

    let mut entries = Vec::with_capacity(thetas.len());
    for theta in thetas {
        let digest = checkpoint_digest(backend, theta)?;
        let mut row = Vec::with_capacity(pool.len());
        for pair in pool {
            let key: CacheKey = (
                fingerprint.clone(),
                digest.clone(),
                pair.content_hash(),
                mode.tag(),
            );
            if let Some(score) = cache.get(&key) {
                row.push(ScoreEntry::Scored(score));
                continue;
            }
            match compute_score(backend, theta, pair, mode) {
                Ok(score) => {
                    cache.insert(key, &score)?;
                    row.push(ScoreEntry::Scored(score));
                }
                Err(ScoringError::Backend(err @ BackendError::ContextOverflow { .. })) => {
                    log::warn!(
                        "demo {} unscoreable against {}: {err}",
                        pair.task_id,
                        theta.task_id
                    );
                    row.push(ScoreEntry::Unscoreable {
                        task_id: theta.task_id.clone(),
                        demo_task_id: pair.task_id.clone(),
                        reason: err.to_string(),
                    });
                }
                Err(other) => return Err(other),
            }
        }
        entries.push(row);
    }
    Ok(PoolScores {
        mode,
        theta_ids: thetas.iter().map(|t| t.task_id.clone()).collect(),
        demo_ids: pool.iter().map(|p| p.task_id.clone()).collect(),
        entries,
    })
}

/// Assign a query to its best-aligned concept by scoring the query itself
/// against every concept and maximizing.
pub fn assign_query_concept(
    backend: &dyn ModelBackend,
    thetas: &[ConceptTokenSet],
    query: &DemonstrationPair,
    mode: ScoreMode,
) -> Result<(String, f64), ScoringError> {
    if thetas.is_empty() {
        return Err(ScoringError::NoThetas);
    }
    let mut per_theta = Vec::with_capacity(thetas.len());
    for theta in thetas {
        match compute_score(backend, theta, query, mode) {
            Ok(score) => per_theta.push((theta.task_id.clone(), Some(score.value))),
            Err(ScoringError::Backend(BackendError::ContextOverflow { .. })) => {
                per_theta.push((theta.task_id.clone(), None));
            }
            Err(other) => return Err(other),
        }
    }
    best_concept_score(&per_theta)
        .ok_or_else(|| ScoringError::UnscoreableQuery(query.task_id.clone()))
}
