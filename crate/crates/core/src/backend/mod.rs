//! Frozen autoregressive language-model abstraction.
//!
//! Two implementations ship: [`tiny::TinyBackend`], a small causal
//! transformer trained from scratch for smoke experiments, and
//! [`stub::StubBackend`], whose conditional distributions are declared in a
//! config table so tests can assert exact expected values.
//!
//! A vocabulary-extension mechanism adds per-task concept tokens whose
//! embedding rows are the only trainable parameters; base weights stay
//! frozen through every concept operation, which is observable through
//! [`ModelBackend::base_digest`].

pub mod stub;
pub mod tiny;
pub mod tokenizer;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Role of a token within an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Concept,
    Input,
    Output,
}

/// A token sequence with per-token segment labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<TokenId>,
    pub segment_labels: Vec<Segment>,
}

impl TokenSequence {
    pub fn new() -> Self {
        TokenSequence {
            token_ids: Vec::new(),
            segment_labels: Vec::new(),
        }
    }

    pub fn from_ids(ids: Vec<TokenId>, segment: Segment) -> Self {
        let segment_labels = vec![segment; ids.len()];
        TokenSequence {
            token_ids: ids,
            segment_labels,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn push(&mut self, id: TokenId, segment: Segment) {
        self.token_ids.push(id);
        self.segment_labels.push(segment);
    }

    pub fn append(&mut self, other: &TokenSequence) {
        self.token_ids.extend_from_slice(&other.token_ids);
        self.segment_labels.extend_from_slice(&other.segment_labels);
    }

    /// Positions whose segment label is `Output`; the usual loss mask.
    pub fn output_positions(&self) -> Vec<usize> {
        self.segment_labels
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Segment::Output)
            .map(|(i, _)| i)
            .collect()
    }
}

impl Default for TokenSequence {
    fn default() -> Self {
        Self::new()
    }
}

/// Decoding parameters for [`ModelBackend::sample_continuation`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub greedy: bool,
    pub temperature: f64,
    /// Nucleus (top-p) mass in (0, 1].
    pub nucleus: f64,
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            greedy: false,
            temperature: 0.8,
            nucleus: 0.95,
            max_new_tokens: 512,
            stop_sequences: vec!["### Problem:".to_string()],
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.greedy && self.temperature <= 0.0 {
            return Err(BackendError::InvalidSampling(
                "temperature must be > 0 unless greedy".into(),
            ));
        }
        if !(self.nucleus > 0.0 && self.nucleus <= 1.0) {
            return Err(BackendError::InvalidSampling(
                "nucleus mass must be in (0, 1]".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(BackendError::InvalidSampling(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Identifies a backend's base weights and tokenizer for provenance and
/// checkpoint compatibility checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub model_fingerprint: String,
    pub embedding_dim: usize,
    pub base_vocab_size: usize,
    pub determinism_seed: u64,
}

/// How freshly added concept rows are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// Copy the embedding of a uniformly sampled existing vocabulary token
    /// per row (seeded).
    CopyVocabRow,
    Zeros,
}

/// Gradient of the concept loss with respect to added embedding rows,
/// keyed by token id. Entries exist only for added tokens appearing in the
/// evaluated sequence.
pub type RowGradients = BTreeMap<TokenId, Vec<f64>>;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("sequence of {length} tokens exceeds context budget {budget}")]
    ContextOverflow { length: usize, budget: usize },
    #[error("character {0:?} is not in the tokenizer alphabet")]
    UntokenizableChar(char),
    #[error("token id {0} is outside the extended vocabulary")]
    UnknownToken(TokenId),
    #[error("token id {0} has no text form")]
    NotText(TokenId),
    #[error("sequence mixes concept tokens of tasks {0:?} and {1:?}")]
    MixedTasks(String, String),
    #[error("task {0:?} already has concept tokens")]
    DuplicateTask(String),
    #[error("task {0:?} has no concept tokens on this backend")]
    UnknownTask(String),
    #[error("concept token count must be >= 1")]
    InvalidConceptCount,
    #[error("loss mask is empty")]
    EmptyMask,
    #[error("mask position {0} is not a valid loss target")]
    InvalidMaskPosition(usize),
    #[error("expected row matrix of shape {expected:?}, got {got:?}")]
    RowShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid sampling config: {0}")]
    InvalidSampling(String),
    #[error("this backend has no tokenizer: {0}")]
    NoTokenizer(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

/// The frozen language model interface.
///
/// Read operations take `&self` and are safe to issue concurrently;
/// embedding mutation (`extend_embeddings`, `set_task_rows`) requires
/// `&mut self`, giving the single-writer/multi-reader contract at compile
/// time.
pub trait ModelBackend {
    fn descriptor(&self) -> BackendDescriptor;
    fn context_budget(&self) -> usize;
    fn base_vocab_size(&self) -> usize;
    /// Current extended vocabulary size (base plus added rows).
    fn vocab_size(&self) -> usize;
    fn eot_token(&self) -> Option<TokenId>;

    /// Deterministic; fails explicitly on text that exceeds the context
    /// budget or contains characters outside the alphabet.
    fn tokenize(&self, text: &str) -> Result<TokenSequence, BackendError>;
    fn detokenize(&self, ids: &[TokenId]) -> Result<String, BackendError>;

    /// `log P(token_i | tokens_<i)` for every position `i >= 1`; the result
    /// has `seq.len() - 1` entries (empty for sequences of length <= 1).
    fn sequence_logprobs(&self, seq: &TokenSequence) -> Result<Vec<f64>, BackendError>;

    /// Sample a continuation of `prefix`. Generation halts at a stop
    /// sequence, `max_new_tokens`, or end-of-text, whichever comes first;
    /// deterministic given (weights, prefix, cfg, seed).
    fn sample_continuation(
        &self,
        prefix: &TokenSequence,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<TokenSequence, BackendError>;

    /// Grow the vocabulary by `c` contiguous token ids owned by `task_id`.
    /// Base weights are untouched.
    fn extend_embeddings(
        &mut self,
        task_id: &str,
        c: usize,
        init: InitRule,
        seed: u64,
    ) -> Result<Vec<TokenId>, BackendError>;

    fn task_token_ids(&self, task_id: &str) -> Option<Vec<TokenId>>;
    /// Concept rows are stored at single precision (the checkpoint width)
    /// and widened to f64 for all model math.
    fn task_rows(&self, task_id: &str) -> Result<Array2<f32>, BackendError>;
    fn set_task_rows(&mut self, task_id: &str, rows: &Array2<f32>) -> Result<(), BackendError>;

    /// Cross-entropy loss over the masked positions plus its gradient with
    /// respect to added embedding rows appearing in `seq`.
    fn concept_loss_and_gradient(
        &self,
        seq: &TokenSequence,
        target_mask: &[usize],
    ) -> Result<(f64, RowGradients), BackendError>;

    /// Digest over all base parameters; identical before and after any
    /// number of concept-training or scoring calls.
    fn base_digest(&self) -> String;
}

/// Registry of added concept-token rows. Added ids are contiguous starting
/// at the base vocabulary size, and distinct tasks own disjoint id ranges.
#[derive(Debug, Clone)]
pub struct EmbeddingExtension {
    base_vocab_size: usize,
    embedding_dim: usize,
    blocks: Vec<TaskBlock>,
}

#[derive(Debug, Clone)]
pub struct TaskBlock {
    pub task_id: String,
    pub first_id: TokenId,
    pub rows: Array2<f32>,
}

impl TaskBlock {
    pub fn token_ids(&self) -> Vec<TokenId> {
        (0..self.rows.nrows())
            .map(|j| self.first_id + j as TokenId)
            .collect()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id >= self.first_id && id < self.first_id + self.rows.nrows() as TokenId
    }
}

impl EmbeddingExtension {
    pub fn new(base_vocab_size: usize, embedding_dim: usize) -> Self {
        EmbeddingExtension {
            base_vocab_size,
            embedding_dim,
            blocks: Vec::new(),
        }
    }

    pub fn base_vocab_size(&self) -> usize {
        self.base_vocab_size
    }

    pub fn total_added(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.nrows()).sum()
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab_size + self.total_added()
    }

    pub fn extend(&mut self, task_id: &str, rows: Array2<f32>) -> Result<Vec<TokenId>, BackendError> {
        if rows.nrows() == 0 {
            return Err(BackendError::InvalidConceptCount);
        }
        if rows.ncols() != self.embedding_dim {
            return Err(BackendError::RowShape {
                expected: (rows.nrows(), self.embedding_dim),
                got: rows.dim(),
            });
        }
        if self.block(task_id).is_some() {
            return Err(BackendError::DuplicateTask(task_id.to_string()));
        }
        let first_id = self.vocab_size() as TokenId;
        let block = TaskBlock {
            task_id: task_id.to_string(),
            first_id,
            rows,
        };
        let ids = block.token_ids();
        self.blocks.push(block);
        Ok(ids)
    }

    pub fn block(&self, task_id: &str) -> Option<&TaskBlock> {
        self.blocks.iter().find(|b| b.task_id == task_id)
    }

    pub fn block_mut(&mut self, task_id: &str) -> Option<&mut TaskBlock> {
        self.blocks.iter_mut().find(|b| b.task_id == task_id)
    }

    pub fn owner_of(&self, id: TokenId) -> Option<&TaskBlock> {
        self.blocks.iter().find(|b| b.contains(id))
    }

    /// The single task whose tokens appear in `ids`, if any.
    ///
    /// Every sequence the pipeline builds involves at most one task's
    /// concept tokens; conditional distributions are then normalized over
    /// the base vocabulary plus that task's tokens, so per-task scores are
    /// independent of any other installed extension.
    pub fn task_scope<'a>(&'a self, ids: &[TokenId]) -> Result<Option<&'a TaskBlock>, BackendError> {
        let mut scope: Option<&TaskBlock> = None;
        for &id in ids {
            if (id as usize) < self.base_vocab_size {
                continue;
            }
            let owner = self
                .owner_of(id)
                .ok_or(BackendError::UnknownToken(id))?;
            match scope {
                None => scope = Some(owner),
                Some(existing) if existing.first_id == owner.first_id => {}
                Some(existing) => {
                    return Err(BackendError::MixedTasks(
                        existing.task_id.clone(),
                        owner.task_id.clone(),
                    ))
                }
            }
        }
        Ok(scope)
    }

    /// Support ids for a scope: the base vocabulary followed by the scoped
    /// task's tokens.
    pub fn support(&self, scope: Option<&TaskBlock>) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = (0..self.base_vocab_size as TokenId).collect();
        if let Some(block) = scope {
            ids.extend(block.token_ids());
        }
        ids
    }
}

/// Draw one token from per-token log-probabilities according to the
/// sampling config. Greedy takes the arg-max (ties to the lowest id);
/// otherwise temperature scaling then nucleus filtering then a seeded draw.
pub(crate) fn sample_token(
    items: &[(TokenId, f64)],
    cfg: &SamplingConfig,
    rng: &mut impl rand::Rng,
) -> TokenId {
    debug_assert!(!items.is_empty());
    if cfg.greedy {
        let mut best = items[0];
        for &(id, lp) in &items[1..] {
            if lp > best.1 || (lp == best.1 && id < best.0) {
                best = (id, lp);
            }
        }
        return best.0;
    }

    // Temperature rescale in log space, then renormalize.
    let scaled: Vec<(TokenId, f64)> = items
        .iter()
        .map(|&(id, lp)| (id, lp / cfg.temperature))
        .collect();
    let max_lp = scaled
        .iter()
        .map(|&(_, lp)| lp)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(TokenId, f64)> = scaled
        .iter()
        .map(|&(id, lp)| (id, (lp - max_lp).exp()))
        .collect();
    let total: f64 = probs.iter().map(|&(_, p)| p).sum();
    for p in &mut probs {
        p.1 /= total;
    }

    // Nucleus: smallest prefix of the probability-sorted tokens whose mass
    // reaches the configured threshold. Ties sort by id for determinism.
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut kept = 0;
    let mut mass = 0.0;
    for (i, &(_, p)) in probs.iter().enumerate() {
        mass += p;
        kept = i + 1;
        if mass >= cfg.nucleus {
            break;
        }
    }
    let nucleus = &probs[..kept];
    let norm: f64 = nucleus.iter().map(|&(_, p)| p).sum();

    let draw: f64 = rng.random::<f64>() * norm;
    let mut acc = 0.0;
    for &(id, p) in nucleus {
        acc += p;
        if draw < acc {
            return id;
        }
    }
    nucleus[nucleus.len() - 1].0
}

/// Scan generated text for the earliest occurrence of any stop sequence.
/// Returns the byte offset to cut at, if a stop matched.
pub(crate) fn earliest_stop(text: &str, stops: &[String]) -> Option<usize> {
    stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
}
