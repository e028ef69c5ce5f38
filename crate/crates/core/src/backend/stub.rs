//! Test backend with analytically declared conditional distributions.
//!
//! The config is a table mapping context classes to next-token
//! distributions. Tests can therefore state exact expected log-probability
//! values. The stub's distributions do not depend on embedding values, so
//! concept gradients are identically zero; gradient behavior is the tiny
//! real backend's job.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::CharTokenizer;
use super::{
    earliest_stop, sample_token, BackendDescriptor, BackendError, EmbeddingExtension, InitRule,
    ModelBackend, RowGradients, SamplingConfig, Segment, TokenId, TokenSequence,
};

fn default_context_budget() -> usize {
    2048
}

fn default_spread() -> bool {
    true
}

/// A next-token distribution: explicit probabilities for listed ids, with
/// the leftover mass optionally spread uniformly over the rest of the
/// support. An empty table with `spread_rest` is the uniform distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubDist {
    #[serde(default)]
    pub probs: BTreeMap<TokenId, f64>,
    #[serde(default = "default_spread")]
    pub spread_rest: bool,
}

impl StubDist {
    pub fn uniform() -> Self {
        StubDist {
            probs: BTreeMap::new(),
            spread_rest: true,
        }
    }

    fn validate(&self) -> Result<(), BackendError> {
        let mut total = 0.0;
        for (&id, &p) in &self.probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(BackendError::Config(format!(
                    "probability {p} for token {id} outside [0, 1]"
                )));
            }
            total += p;
        }
        if total > 1.0 + 1e-9 {
            return Err(BackendError::Config(format!(
                "declared probabilities sum to {total} > 1"
            )));
        }
        if !self.spread_rest && (total - 1.0).abs() > 1e-9 {
            return Err(BackendError::Config(format!(
                "declared probabilities sum to {total} but spread_rest is false"
            )));
        }
        Ok(())
    }

    /// Probability of `id` within the given support.
    fn prob(&self, id: TokenId, support: &[TokenId]) -> f64 {
        if let Some(&p) = self.probs.get(&id) {
            return p;
        }
        if !self.spread_rest {
            return 0.0;
        }
        let declared_mass: f64 = support
            .iter()
            .filter_map(|s| self.probs.get(s))
            .sum();
        let unlisted = support
            .iter()
            .filter(|s| !self.probs.contains_key(s))
            .count();
        if unlisted == 0 {
            return 0.0;
        }
        (1.0 - declared_mass) / unlisted as f64
    }
}

/// Context matcher for a stub rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubMatcher {
    /// All listed token ids occur somewhere in the context prefix.
    ContainsTokens(Vec<TokenId>),
    /// The tokenized text occurs as a consecutive run in the context
    /// prefix (requires an alphabet-backed stub).
    ContainsText(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubRule {
    pub when: StubMatcher,
    pub dist: StubDist,
}

/// Stub backend config: the context-class table plus vocabulary shape.
/// Exactly one of `alphabet` (tokenizer-backed) or `vocab_size`
/// (pure-token) must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubConfig {
    #[serde(default)]
    pub alphabet: Option<String>,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    pub embedding_dim: usize,
    #[serde(default = "default_context_budget")]
    pub context_budget: usize,
    #[serde(default)]
    pub rules: Vec<StubRule>,
    pub default: StubDist,
    #[serde(default)]
    pub seed: u64,
}

impl StubConfig {
    /// Minimal uniform stub over `vocab_size` tokens.
    pub fn uniform(vocab_size: usize, embedding_dim: usize) -> Self {
        StubConfig {
            alphabet: None,
            vocab_size: Some(vocab_size),
            embedding_dim,
            context_budget: default_context_budget(),
            rules: Vec::new(),
            default: StubDist::uniform(),
            seed: 0,
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

pub struct StubBackend {
    config: StubConfig,
    tokenizer: Option<CharTokenizer>,
    base_vocab_size: usize,
    /// Deterministic pseudo base embedding, the source for copy-row
    /// initialization of concept rows.
    base_rows: Array2<f32>,
    extension: EmbeddingExtension,
    fingerprint: String,
}

impl StubBackend {
    pub fn new(config: StubConfig) -> Result<Self, BackendError> {
        let (tokenizer, base_vocab_size) = match (&config.alphabet, config.vocab_size) {
            (Some(alphabet), None) => {
                let tok = CharTokenizer::new(alphabet)?;
                let size = tok.vocab_size();
                (Some(tok), size)
            }
            (None, Some(size)) if size > 0 => (None, size),
            _ => {
                return Err(BackendError::Config(
                    "set exactly one of alphabet or vocab_size (> 0)".into(),
                ))
            }
        };
        config.default.validate()?;
        for rule in &config.rules {
            rule.dist.validate()?;
            if matches!(rule.when, StubMatcher::ContainsText(_)) && tokenizer.is_none() {
                return Err(BackendError::Config(
                    "contains_text matcher requires an alphabet".into(),
                ));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base_rows = Array2::from_shape_fn((base_vocab_size, config.embedding_dim), |_| {
            rng.random_range(-0.5f32..0.5f32)
        });
        let fingerprint = hex::encode(Sha256::digest(config.canonical_json().as_bytes()));
        let extension = EmbeddingExtension::new(base_vocab_size, config.embedding_dim);
        Ok(StubBackend {
            config,
            tokenizer,
            base_vocab_size,
            base_rows,
            extension,
            fingerprint,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, BackendError> {
        let config: StubConfig =
            serde_json::from_str(json).map_err(|e| BackendError::Config(e.to_string()))?;
        Self::new(config)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<(), BackendError> {
        let vocab = self.vocab_size() as TokenId;
        for &id in ids {
            if id >= vocab {
                return Err(BackendError::UnknownToken(id));
            }
        }
        Ok(())
    }

    fn matches(&self, matcher: &StubMatcher, context: &[TokenId]) -> bool {
        match matcher {
            StubMatcher::ContainsTokens(needles) => {
                needles.iter().all(|needle| context.contains(needle))
            }
            StubMatcher::ContainsText(text) => {
                let Some(tok) = &self.tokenizer else {
                    return false;
                };
                let Ok(needle) = tok.encode(text) else {
                    return false;
                };
                if needle.is_empty() {
                    return true;
                }
                context
                    .windows(needle.len())
                    .any(|window| window == needle.as_slice())
            }
        }
    }

    fn dist_for(&self, context: &[TokenId]) -> &StubDist {
        for rule in &self.config.rules {
            if self.matches(&rule.when, context) {
                return &rule.dist;
            }
        }
        &self.config.default
    }

    /// ln P(id | context) over the scoped support.
    fn logprob(&self, context: &[TokenId], id: TokenId, support: &[TokenId]) -> f64 {
        self.dist_for(context).prob(id, support).ln()
    }
}

impl ModelBackend for StubBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            model_fingerprint: self.fingerprint.clone(),
            embedding_dim: self.config.embedding_dim,
            base_vocab_size: self.base_vocab_size,
            determinism_seed: self.config.seed,
        }
    }

    fn context_budget(&self) -> usize {
        self.config.context_budget
    }

    fn base_vocab_size(&self) -> usize {
        self.base_vocab_size
    }

    fn vocab_size(&self) -> usize {
        self.extension.vocab_size()
    }

    fn eot_token(&self) -> Option<TokenId> {
        self.tokenizer.as_ref().map(|t| t.eot_id())
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, BackendError> {
        let tok = self.tokenizer.as_ref().ok_or_else(|| {
            BackendError::NoTokenizer("pure-token stub cannot tokenize text".into())
        })?;
        let ids = tok.encode(text)?;
        if ids.len() > self.config.context_budget {
            return Err(BackendError::ContextOverflow {
                length: ids.len(),
                budget: self.config.context_budget,
            });
        }
        Ok(TokenSequence::from_ids(ids, Segment::Input))
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, BackendError> {
        let tok = self.tokenizer.as_ref().ok_or_else(|| {
            BackendError::NoTokenizer("pure-token stub cannot detokenize".into())
        })?;
        tok.decode(ids)
    }

    fn sequence_logprobs(&self, seq: &TokenSequence) -> Result<Vec<f64>, BackendError> {
        self.check_ids(&seq.token_ids)?;
        if seq.len() > self.config.context_budget {
            return Err(BackendError::ContextOverflow {
                length: seq.len(),
                budget: self.config.context_budget,
            });
        }
        let scope = self.extension.task_scope(&seq.token_ids)?;
        let support = self.extension.support(scope);
        let ids = &seq.token_ids;
        Ok((1..ids.len())
            .map(|i| self.logprob(&ids[..i], ids[i], &support))
            .collect())
    }

    fn sample_continuation(
        &self,
        prefix: &TokenSequence,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<TokenSequence, BackendError> {
        cfg.validate()?;
        self.check_ids(&prefix.token_ids)?;
        if prefix.len() + cfg.max_new_tokens > self.config.context_budget {
            return Err(BackendError::ContextOverflow {
                length: prefix.len() + cfg.max_new_tokens,
                budget: self.config.context_budget,
            });
        }
        let wants_stops = cfg.stop_sequences.iter().any(|s| !s.is_empty());
        if wants_stops && self.tokenizer.is_none() {
            return Err(BackendError::NoTokenizer(
                "stop sequences require an alphabet-backed stub".into(),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scope = self.extension.task_scope(&prefix.token_ids)?;
        let support = self.extension.support(scope);
        let eot = self.eot_token();

        let mut context = prefix.token_ids.clone();
        let mut generated: Vec<TokenId> = Vec::new();
        for _ in 0..cfg.max_new_tokens {
            let dist = self.dist_for(&context);
            let items: Vec<(TokenId, f64)> = support
                .iter()
                .map(|&id| (id, dist.prob(id, &support).ln()))
                .filter(|&(_, lp)| lp.is_finite())
                .collect();
            if items.is_empty() {
                break;
            }
            let next = sample_token(&items, cfg, &mut rng);
            if Some(next) == eot {
                break;
            }
            generated.push(next);
            context.push(next);

            if wants_stops {
                let tok = self.tokenizer.as_ref().expect("checked above");
                let text = tok.decode(&generated)?;
                if let Some(cut) = earliest_stop(&text, &cfg.stop_sequences) {
                    let kept = text[..cut].to_string();
                    let ids = tok.encode(&kept)?;
                    return Ok(TokenSequence::from_ids(ids, Segment::Output));
                }
            }
        }
        Ok(TokenSequence::from_ids(generated, Segment::Output))
    }

    fn extend_embeddings(
        &mut self,
        task_id: &str,
        c: usize,
        init: InitRule,
        seed: u64,
    ) -> Result<Vec<TokenId>, BackendError> {
        if c == 0 {
            return Err(BackendError::InvalidConceptCount);
        }
        let dim = self.config.embedding_dim;
        let rows = match init {
            InitRule::Zeros => Array2::zeros((c, dim)),
            InitRule::CopyVocabRow => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut rows = Array2::zeros((c, dim));
                for j in 0..c {
                    let src = rng.random_range(0..self.base_vocab_size);
                    rows.row_mut(j).assign(&self.base_rows.row(src));
                }
                rows
            }
        };
        self.extension.extend(task_id, rows)
    }

    fn task_token_ids(&self, task_id: &str) -> Option<Vec<TokenId>> {
        self.extension.block(task_id).map(|b| b.token_ids())
    }

    fn task_rows(&self, task_id: &str) -> Result<Array2<f32>, BackendError> {
        self.extension
            .block(task_id)
            .map(|b| b.rows.clone())
            .ok_or_else(|| BackendError::UnknownTask(task_id.to_string()))
    }

    fn set_task_rows(&mut self, task_id: &str, rows: &Array2<f32>) -> Result<(), BackendError> {
        let block = self
            .extension
            .block_mut(task_id)
            .ok_or_else(|| BackendError::UnknownTask(task_id.to_string()))?;
        if rows.dim() != block.rows.dim() {
            return Err(BackendError::RowShape {
                expected: block.rows.dim(),
                got: rows.dim(),
            });
        }
        block.rows.assign(rows);
        Ok(())
    }

    fn concept_loss_and_gradient(
        &self,
        seq: &TokenSequence,
        target_mask: &[usize],
    ) -> Result<(f64, RowGradients), BackendError> {
        validate_mask(seq, target_mask)?;
        let logprobs = self.sequence_logprobs(seq)?;
        let loss: f64 = target_mask.iter().map(|&i| -logprobs[i - 1]).sum();

        // Declared distributions do not depend on embedding rows, so the
        // gradient is identically zero for every added row in the sequence.
        let mut grads = RowGradients::new();
        for &id in &seq.token_ids {
            if (id as usize) >= self.base_vocab_size {
                grads
                    .entry(id)
                    .or_insert_with(|| vec![0.0; self.config.embedding_dim]);
            }
        }
        Ok((loss, grads))
    }

    fn base_digest(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Shared mask validation: nonempty, in range, position >= 1, label Output.
pub(crate) fn validate_mask(
    seq: &TokenSequence,
    target_mask: &[usize],
) -> Result<(), BackendError> {
    if target_mask.is_empty() {
        return Err(BackendError::EmptyMask);
    }
    for &pos in target_mask {
        if pos == 0 || pos >= seq.len() {
            return Err(BackendError::InvalidMaskPosition(pos));
        }
        if seq.segment_labels[pos] != Segment::Output {
            return Err(BackendError::InvalidMaskPosition(pos));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform4() -> StubBackend {
        StubBackend::new(StubConfig::uniform(4, 8)).unwrap()
    }

    #[test]
    fn uniform_logprobs_are_exact() {
        let stub = uniform4();
        let seq = TokenSequence::from_ids(vec![0, 1, 2, 3, 1], Segment::Input);
        let lps = stub.sequence_logprobs(&seq).unwrap();
        assert_eq!(lps.len(), 4);
        for lp in lps {
            assert_eq!(lp, (1.0f64 / 4.0).ln());
        }
    }

    #[test]
    fn single_token_sequence_has_no_logprobs() {
        let stub = uniform4();
        let seq = TokenSequence::from_ids(vec![2], Segment::Input);
        assert!(stub.sequence_logprobs(&seq).unwrap().is_empty());
    }

    #[test]
    fn appending_never_changes_earlier_logprobs() {
        let mut config = StubConfig::uniform(6, 4);
        config.rules.push(StubRule {
            when: StubMatcher::ContainsTokens(vec![5]),
            dist: StubDist {
                probs: BTreeMap::from([(0, 0.9)]),
                spread_rest: true,
            },
        });
        let stub = StubBackend::new(config).unwrap();
        let short = TokenSequence::from_ids(vec![0, 1, 2], Segment::Input);
        let long = TokenSequence::from_ids(vec![0, 1, 2, 5, 0], Segment::Input);
        let short_lps = stub.sequence_logprobs(&short).unwrap();
        let long_lps = stub.sequence_logprobs(&long).unwrap();
        assert_eq!(short_lps[..], long_lps[..2]);
    }

    #[test]
    fn rule_lookup_prefers_first_match() {
        let mut config = StubConfig::uniform(4, 4);
        config.rules = vec![
            StubRule {
                when: StubMatcher::ContainsTokens(vec![1]),
                dist: StubDist {
                    probs: BTreeMap::from([(0, 0.5)]),
                    spread_rest: true,
                },
            },
            StubRule {
                when: StubMatcher::ContainsTokens(vec![1, 2]),
                dist: StubDist {
                    probs: BTreeMap::from([(0, 0.25)]),
                    spread_rest: true,
                },
            },
        ];
        let stub = StubBackend::new(config).unwrap();
        let seq = TokenSequence::from_ids(vec![1, 2, 0], Segment::Input);
        let lps = stub.sequence_logprobs(&seq).unwrap();
        // Context [1, 2] matches the first rule already.
        assert_eq!(lps[1], 0.5f64.ln());
    }

    #[test]
    fn greedy_dominant_token_repeats_until_cap() {
        let mut config = StubConfig::uniform(4, 4);
        config.default = StubDist {
            probs: BTreeMap::from([(2, 0.9)]),
            spread_rest: true,
        };
        let stub = StubBackend::new(config).unwrap();
        let cfg = SamplingConfig {
            greedy: true,
            max_new_tokens: 7,
            stop_sequences: vec![],
            ..SamplingConfig::default()
        };
        let prefix = TokenSequence::from_ids(vec![0], Segment::Input);
        let out = stub.sample_continuation(&prefix, &cfg, 1).unwrap();
        assert_eq!(out.token_ids, vec![2; 7]);
    }

    #[test]
    fn same_seed_same_continuation() {
        let stub = uniform4();
        let cfg = SamplingConfig {
            greedy: false,
            temperature: 1.0,
            nucleus: 1.0,
            max_new_tokens: 16,
            stop_sequences: vec![],
        };
        let prefix = TokenSequence::from_ids(vec![0, 1], Segment::Input);
        let a = stub.sample_continuation(&prefix, &cfg, 42).unwrap();
        let b = stub.sample_continuation(&prefix, &cfg, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stop_sequence_matching_first_text_gives_empty_body() {
        let config = StubConfig {
            alphabet: Some("ab".into()),
            vocab_size: None,
            embedding_dim: 4,
            context_budget: 64,
            rules: vec![],
            // 'a' always dominates.
            default: StubDist {
                probs: BTreeMap::from([(0, 1.0)]),
                spread_rest: false,
            },
            seed: 0,
        };
        let stub = StubBackend::new(config).unwrap();
        let cfg = SamplingConfig {
            greedy: true,
            max_new_tokens: 8,
            stop_sequences: vec!["a".into()],
            ..SamplingConfig::default()
        };
        let prefix = stub.tokenize("b").unwrap();
        let out = stub.sample_continuation(&prefix, &cfg, 0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn budget_overflow_is_explicit() {
        let mut config = StubConfig::uniform(4, 4);
        config.context_budget = 8;
        let stub = StubBackend::new(config).unwrap();
        let seq = TokenSequence::from_ids(vec![0; 9], Segment::Input);
        assert!(matches!(
            stub.sequence_logprobs(&seq),
            Err(BackendError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn tokenize_overflow_is_explicit() {
        let config = StubConfig {
            alphabet: Some("ab".into()),
            vocab_size: None,
            embedding_dim: 4,
            context_budget: 4,
            rules: vec![],
            default: StubDist::uniform(),
            seed: 0,
        };
        let stub = StubBackend::new(config).unwrap();
        assert!(matches!(
            stub.tokenize("aaaaa"),
            Err(BackendError::ContextOverflow { .. })
        ));
    }

    #[test]
    fn extension_ids_are_contiguous_and_disjoint() {
        let mut stub = StubBackend::new(StubConfig::uniform(100, 8)).unwrap();
        let a = stub
            .extend_embeddings("task-a", 10, InitRule::CopyVocabRow, 1)
            .unwrap();
        let b = stub
            .extend_embeddings("task-b", 10, InitRule::CopyVocabRow, 2)
            .unwrap();
        assert_eq!(a, (100..110).collect::<Vec<_>>());
        assert_eq!(b, (110..120).collect::<Vec<_>>());
        assert!(matches!(
            stub.extend_embeddings("task-a", 4, InitRule::Zeros, 3),
            Err(BackendError::DuplicateTask(_))
        ));
        assert!(matches!(
            stub.extend_embeddings("task-c", 0, InitRule::Zeros, 3),
            Err(BackendError::InvalidConceptCount)
        ));
    }

    #[test]
    fn same_seed_same_initial_rows() {
        let mut a = StubBackend::new(StubConfig::uniform(50, 8)).unwrap();
        let mut b = StubBackend::new(StubConfig::uniform(50, 8)).unwrap();
        a.extend_embeddings("t", 5, InitRule::CopyVocabRow, 9).unwrap();
        b.extend_embeddings("t", 5, InitRule::CopyVocabRow, 9).unwrap();
        assert_eq!(a.task_rows("t").unwrap(), b.task_rows("t").unwrap());
    }

    #[test]
    fn uniform_loss_is_mask_times_ln_vocab() {
        let stub = uniform4();
        let mut seq = TokenSequence::from_ids(vec![0], Segment::Input);
        for id in [1, 2, 3] {
            seq.push(id, Segment::Output);
        }
        let (loss, grads) = stub.concept_loss_and_gradient(&seq, &[1, 2, 3]).unwrap();
        assert_eq!(loss, 3.0 * 4.0f64.ln());
        assert!(grads.is_empty());
    }

    #[test]
    fn doubling_the_mask_doubles_the_loss() {
        let stub = uniform4();
        let mut seq = TokenSequence::from_ids(vec![0], Segment::Input);
        for id in [1, 2, 1, 2] {
            seq.push(id, Segment::Output);
        }
        let (half, _) = stub.concept_loss_and_gradient(&seq, &[1, 2]).unwrap();
        let (full, _) = stub.concept_loss_and_gradient(&seq, &[1, 2, 3, 4]).unwrap();
        assert_eq!(full, 2.0 * half);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let stub = uniform4();
        let seq = TokenSequence::from_ids(vec![0, 1], Segment::Output);
        assert!(matches!(
            stub.concept_loss_and_gradient(&seq, &[]),
            Err(BackendError::EmptyMask)
        ));
    }

    #[test]
    fn gradient_rows_cover_added_tokens_in_seq() {
        let mut stub = StubBackend::new(StubConfig::uniform(4, 8)).unwrap();
        let ids = stub.extend_embeddings("t", 2, InitRule::Zeros, 0).unwrap();
        let mut seq = TokenSequence::from_ids(ids.clone(), Segment::Concept);
        seq.push(1, Segment::Input);
        seq.push(2, Segment::Output);
        let (_, grads) = stub.concept_loss_and_gradient(&seq, &[3]).unwrap();
        assert_eq!(grads.keys().copied().collect::<Vec<_>>(), ids);
        assert!(grads.values().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn frozen_digest_survives_extension_and_row_updates() {
        let mut stub = StubBackend::new(StubConfig::uniform(10, 4)).unwrap();
        let before = stub.base_digest();
        stub.extend_embeddings("t", 3, InitRule::CopyVocabRow, 0).unwrap();
        let rows = Array2::from_elem((3, 4), 0.25f32);
        stub.set_task_rows("t", &rows).unwrap();
        assert_eq!(stub.base_digest(), before);
    }

    #[test]
    fn config_json_round_trip() {
        let json = r#"{
            "vocab_size": 4,
            "embedding_dim": 8,
            "rules": [
                {"when": {"contains_tokens": [1]}, "dist": {"probs": {"0": 0.5}, "spread_rest": true}}
            ],
            "default": {"probs": {}, "spread_rest": true}
        }"#;
        let stub = StubBackend::from_json(json).unwrap();
        let seq = TokenSequence::from_ids(vec![1, 0], Segment::Input);
        let lps = stub.sequence_logprobs(&seq).unwrap();
        assert_eq!(lps[0], 0.5f64.ln());
    }
}
