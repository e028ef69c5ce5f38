//! Concept-token training.
//!
//! Each task gets `c` added vocabulary tokens; their embedding rows are the
//! only parameters that move. Training minimizes the cross-entropy of the
//! golden solution given the concept tokens and the rendered problem, with
//! the base model frozen throughout.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    BackendError, InitRule, ModelBackend, Segment, TokenId, TokenSequence,
};
use crate::corpus::DemonstrationPair;
use crate::generation::{problem_block, solution_block};

/// Checkpoint file magic.
const CHECKPOINT_MAGIC: &[u8; 4] = b"DCPT";
const CHECKPOINT_VERSION: u32 = 1;

/// A task's trained concept tokens: the added vocabulary ids plus where
/// their rows were persisted.
#[derive(Debug, Clone)]
pub struct ConceptTokenSet {
    pub task_id: String,
    pub token_ids: Vec<TokenId>,
    pub c: usize,
    pub checkpoint_ref: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub c: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    #[serde(default = "default_init")]
    pub init: InitRule,
}

fn default_init() -> InitRule {
    InitRule::CopyVocabRow
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            c: 10,
            epochs: 30,
            learning_rate: 0.3,
            batch_size: 4,
            seed: 0,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<(), TrainingError> {
        if self.c == 0 {
            return Err(TrainingError::InvalidConfig("c must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainingError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step loss record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// `(step index, loss)`; step 0 is the initial evaluation over all
    /// pairs, later steps are batch losses.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub wall_time: f64,
}

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no demonstration pairs to train on")]
    NoPairs,
    #[error("pair {task_id:?} does not fit the context budget: {source}")]
    PairOverflow {
        task_id: String,
        source: BackendError,
    },
    #[error("all {0} pairs overflow the context budget")]
    AllPairsOverflow(usize),
    #[error("pair {task_id:?} produced an empty loss mask")]
    EmptyOutput { task_id: String },
    #[error("loss diverged to {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("checkpoint io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse: {0}")]
    Parse(String),
    #[error("checkpoint was trained against fingerprint {expected} but the backend is {found}")]
    FingerprintMismatch { expected: String, found: String },
}

/// Build the training sequence `[concept tokens][rendered X][rendered Y]`
/// with the loss mask over the output positions.
///
/// X and Y are rendered through the shared problem/solution blocks so that
/// training, scoring, and generation all condition on the same text.
pub fn assemble_training_sequence(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
    pair: &DemonstrationPair,
) -> Result<(TokenSequence, Vec<usize>), TrainingError> {
    let input = backend
        .tokenize(&problem_block(&pair.prompt_text))
        .map_err(|source| overflow_or(source, pair))?;
    let output = backend
        .tokenize(&solution_block(&pair.golden_code))
        .map_err(|source| overflow_or(source, pair))?;
    if output.is_empty() {
        return Err(TrainingError::EmptyOutput {
            task_id: pair.task_id.clone(),
        });
    }

    let total = theta.token_ids.len() + input.len() + output.len();
    if total > backend.context_budget() {
        return Err(TrainingError::PairOverflow {
            task_id: pair.task_id.clone(),
            source: BackendError::ContextOverflow {
                length: total,
                budget: backend.context_budget(),
            },
        });
    }

    let mut seq = TokenSequence::from_ids(theta.token_ids.clone(), Segment::Concept);
    for &id in &input.token_ids {
        seq.push(id, Segment::Input);
    }
    let first_output = seq.len();
    for &id in &output.token_ids {
        seq.push(id, Segment::Output);
    }
    let mask: Vec<usize> = (first_output..seq.len()).collect();
    Ok((seq, mask))
}

fn overflow_or(source: BackendError, pair: &DemonstrationPair) -> TrainingError {
    match source {
        BackendError::ContextOverflow { .. } => TrainingError::PairOverflow {
            task_id: pair.task_id.clone(),
            source,
        },
        other => TrainingError::Backend(other),
    }
}

/// Adam over the task's concept rows only.
struct RowAdam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
    lr: f64,
}

impl RowAdam {
    fn new(c: usize, d: usize, lr: f64) -> Self {
        RowAdam {
            m: Array2::zeros((c, d)),
            v: Array2::zeros((c, d)),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, rows: &mut Array2<f64>, grad: &Array2<f64>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((w, &g), (m, v)) in rows
            .iter_mut()
            .zip(grad.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Train a task's concept rows on its demonstration pairs.
///
/// Deterministic given the config seed; only added rows move (the base
/// digest is unchanged). The returned trace records the initial evaluation
/// loss at step 0 and one batch loss per optimizer step.
pub fn train_task_concept(
    backend: &mut dyn ModelBackend,
    task_id: &str,
    pairs: &[DemonstrationPair],
    cfg: &TrainingConfig,
) -> Result<(ConceptTokenSet, TrainingTrace), TrainingError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainingError::NoPairs);
    }
    let start = Instant::now();

    let token_ids = backend.extend_embeddings(task_id, cfg.c, cfg.init, cfg.seed)?;
    let theta = ConceptTokenSet {
        task_id: task_id.to_string(),
        token_ids,
        c: cfg.c,
        checkpoint_ref: None,
    };

    // Assemble once; pairs that cannot fit are skipped with a diagnostic.
    let mut sequences: Vec<(TokenSequence, Vec<usize>)> = Vec::new();
    for pair in pairs {
        match assemble_training_sequence(backend, &theta, pair) {
            Ok(assembled) => sequences.push(assembled),
            Err(TrainingError::PairOverflow { task_id, source }) => {
                log::warn!("skipping pair {task_id}: {source}");
            }
            Err(other) => return Err(other),
        }
    }
    if sequences.is_empty() {
        return Err(TrainingError::AllPairsOverflow(pairs.len()));
    }

    let dim = backend.descriptor().embedding_dim;
    let mut rows: Array2<f64> = backend.task_rows(task_id)?.mapv(|v| v as f64);
    let mut optimizer = RowAdam::new(cfg.c, dim, cfg.learning_rate);

    let eval_loss = |backend: &dyn ModelBackend,
                     seqs: &[(TokenSequence, Vec<usize>)]|
     -> Result<f64, TrainingError> {
        let mut total = 0.0;
        for (seq, mask) in seqs {
            total += backend.concept_loss_and_gradient(seq, mask)?.0;
        }
        Ok(total / seqs.len() as f64)
    };

    let mut losses: Vec<(usize, f64)> = Vec::new();
    losses.push((0, eval_loss(backend, &sequences)?));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut step = 0usize;
    let mut best = losses[0].1;
    let mut stale = 0usize;

    'epochs: for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut grad: Array2<f64> = Array2::zeros((cfg.c, dim));
            let mut batch_loss = 0.0;
            for &si in chunk {
                let (seq, mask) = &sequences[si];
                let (loss, row_grads) = backend.concept_loss_and_gradient(seq, mask)?;
                batch_loss += loss;
                for (j, id) in theta.token_ids.iter().enumerate() {
                    if let Some(g) = row_grads.get(id) {
                        for (dst, &src) in grad.row_mut(j).iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            batch_loss *= scale;
            grad *= scale;

            if !batch_loss.is_finite() {
                return Err(TrainingError::NonFiniteLoss {
                    step,
                    loss: batch_loss,
                });
            }

            optimizer.step(&mut rows, &grad);
            // Store at checkpoint precision so in-memory rows always equal
            // their persisted form.
            let rows32 = rows.mapv(|v| v as f32);
            rows = rows32.mapv(|v| v as f64);
            backend.set_task_rows(task_id, &rows32)?;

            losses.push((step, batch_loss));
            if let Some(patience) = cfg.early_stop_patience {
                if batch_loss < best - 1e-9 {
                    best = batch_loss;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        break 'epochs;
                    }
                }
            }
        }
    }

    let final_loss = losses.last().expect("nonempty").1;
    let trace = TrainingTrace {
        losses,
        final_loss,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((theta, trace))
}

/// Serialize a checkpoint: fixed header then the rows as little-endian f32,
/// row-major.
pub fn encode_checkpoint(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
) -> Result<Vec<u8>, TrainingError> {
    let rows = backend.task_rows(&theta.task_id)?;
    let descriptor = backend.descriptor();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let id_bytes = theta.task_id.as_bytes();
    out.extend_from_slice(&(id_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(id_bytes);
    out.extend_from_slice(&(theta.c as u32).to_le_bytes());
    out.extend_from_slice(&(descriptor.embedding_dim as u32).to_le_bytes());
    out.extend_from_slice(&(descriptor.base_vocab_size as u32).to_le_bytes());
    let fp_bytes = descriptor.model_fingerprint.as_bytes();
    out.extend_from_slice(&(fp_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(fp_bytes);
    for &v in rows.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Digest of the encoded checkpoint; scoring cache keys include it.
pub fn checkpoint_digest(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
) -> Result<String, TrainingError> {
    Ok(hex::encode(Sha256::digest(encode_checkpoint(backend, theta)?)))
}

pub fn save_checkpoint(
    backend: &dyn ModelBackend,
    theta: &ConceptTokenSet,
    path: &Path,
) -> Result<(), TrainingError> {
    let bytes = encode_checkpoint(backend, theta)?;
    let mut file = std::fs::File::create(path).map_err(|source| TrainingError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&bytes).map_err(|source| TrainingError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainingError> {
        if self.pos + n > self.bytes.len() {
            return Err(TrainingError::Parse("truncated checkpoint".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take_u32(&mut self) -> Result<u32, TrainingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Load a checkpoint and install its rows on the backend, refusing
/// mismatched base models. The file is parsed completely before any backend
/// state changes, so a corrupt file leaves no partial state.
pub fn load_checkpoint(
    backend: &mut dyn ModelBackend,
    path: &Path,
) -> Result<ConceptTokenSet, TrainingError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| TrainingError::Io {
            path: path.display().to_string(),
            source,
        })?;

    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(TrainingError::Parse("bad magic".into()));
    }
    let version = cur.take_u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainingError::Parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let id_len = cur.take_u32()? as usize;
    let task_id = String::from_utf8(cur.take(id_len)?.to_vec())
        .map_err(|_| TrainingError::Parse("task_id is not utf-8".into()))?;
    let c = cur.take_u32()? as usize;
    let dim = cur.take_u32()? as usize;
    let base_vocab = cur.take_u32()? as usize;
    let fp_len = cur.take_u32()? as usize;
    let fingerprint = String::from_utf8(cur.take(fp_len)?.to_vec())
        .map_err(|_| TrainingError::Parse("fingerprint is not utf-8".into()))?;

    let mut rows = Array2::<f32>::zeros((c, dim));
    for j in 0..c {
        for i in 0..dim {
            let b = cur.take(4)?;
            rows[[j, i]] = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(TrainingError::Parse("trailing bytes".into()));
    }

    let descriptor = backend.descriptor();
    if fingerprint != descriptor.model_fingerprint {
        return Err(TrainingError::FingerprintMismatch {
            expected: fingerprint,
            found: descriptor.model_fingerprint,
        });
    }
    if dim != descriptor.embedding_dim || base_vocab != descriptor.base_vocab_size {
        return Err(TrainingError::Parse(format!(
            "checkpoint shape ({dim}, base {base_vocab}) does not match backend ({}, base {})",
            descriptor.embedding_dim, descriptor.base_vocab_size
        )));
    }

    let token_ids = match backend.task_token_ids(&task_id) {
        Some(ids) if ids.len() == c => ids,
        Some(ids) => {
            return Err(TrainingError::Parse(format!(
                "task {task_id:?} already installed with c={}, checkpoint has c={c}",
                ids.len()
            )))
        }
        None => backend.extend_embeddings(&task_id, c, InitRule::Zeros, 0)?,
    };
    backend.set_task_rows(&task_id, &rows)?;
    Ok(ConceptTokenSet {
        task_id,
        token_ids,
        c,
        checkpoint_ref: Some(path.to_path_buf()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::stub::{StubBackend, StubConfig, StubDist};
    use crate::backend::tiny::{TinyBackend, TinyConfig};
    use crate::backend::tokenizer::DEFAULT_ALPHABET;

    fn pair(id: &str, prompt: &str, code: &str) -> DemonstrationPair {
        DemonstrationPair {
            task_id: id.into(),
            prompt_text: prompt.into(),
            golden_code: code.into(),
            tests: vec!["assert True".into()],
            language_tag: "python".into(),
        }
    }

    fn tiny(max_seq: usize) -> TinyBackend {
        TinyBackend::new(TinyConfig {
            alphabet: DEFAULT_ALPHABET.into(),
            embedding_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 24,
            max_seq_len: max_seq,
            init_seed: 4,
        })
        .unwrap()
    }

    fn text_stub() -> StubBackend {
        StubBackend::new(StubConfig {
            alphabet: Some(DEFAULT_ALPHABET.into()),
            vocab_size: None,
            embedding_dim: 8,
            context_budget: 512,
            rules: vec![],
            default: StubDist::uniform(),
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn assembled_layout_and_mask() {
        let mut backend = tiny(256);
        let ids = backend
            .extend_embeddings("t", 2, InitRule::CopyVocabRow, 0)
            .unwrap();
        let theta = ConceptTokenSet {
            task_id: "t".into(),
            token_ids: ids,
            c: 2,
            checkpoint_ref: None,
        };
        let p = pair("p", "add", "x=1");
        let (seq, mask) = assemble_training_sequence(&backend, &theta, &p).unwrap();
        let input_len = problem_block("add").chars().count();
        let output_len = solution_block("x=1").chars().count();
        assert_eq!(seq.len(), 2 + input_len + output_len);
        assert_eq!(mask.len(), output_len);
        assert_eq!(mask[0], 2 + input_len);
        assert_eq!(seq.segment_labels[0], Segment::Concept);
        assert_eq!(seq.segment_labels[2], Segment::Input);
        assert_eq!(seq.segment_labels[2 + input_len], Segment::Output);
    }

    #[test]
    fn assembly_overflow_names_the_pair() {
        let mut backend = tiny(32);
        let ids = backend
            .extend_embeddings("t", 2, InitRule::CopyVocabRow, 0)
            .unwrap();
        let theta = ConceptTokenSet {
            task_id: "t".into(),
            token_ids: ids,
            c: 2,
            checkpoint_ref: None,
        };
        let p = pair("big", &"x".repeat(20), &"y".repeat(20));
        match assemble_training_sequence(&backend, &theta, &p) {
            Err(TrainingError::PairOverflow { task_id, .. }) => assert_eq!(task_id, "big"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization_rows() {
        let cfg = TrainingConfig {
            c: 3,
            epochs: 0,
            seed: 11,
            ..TrainingConfig::default()
        };
        let mut trained = tiny(256);
        let (_, trace) =
            train_task_concept(&mut trained, "t", &[pair("p", "ab", "cd")], &cfg).unwrap();
        assert_eq!(trace.losses.len(), 1);
        assert_eq!(trace.losses[0].0, 0);

        let mut fresh = tiny(256);
        fresh
            .extend_embeddings("t", 3, InitRule::CopyVocabRow, 11)
            .unwrap();
        assert_eq!(
            trained.task_rows("t").unwrap(),
            fresh.task_rows("t").unwrap()
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = TrainingConfig {
            c: 2,
            epochs: 3,
            learning_rate: 0.1,
            batch_size: 2,
            seed: 5,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        };
        let pairs = vec![pair("a", "ab", "cd"), pair("b", "ef", "gh")];
        let mut one = tiny(256);
        let mut two = tiny(256);
        let (_, trace1) = train_task_concept(&mut one, "t", &pairs, &cfg).unwrap();
        let (_, trace2) = train_task_concept(&mut two, "t", &pairs, &cfg).unwrap();
        assert_eq!(one.task_rows("t").unwrap(), two.task_rows("t").unwrap());
        assert_eq!(trace1.losses, trace2.losses);
    }

    #[test]
    fn training_moves_only_concept_rows() {
        let cfg = TrainingConfig {
            c: 2,
            epochs: 2,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 5,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        };
        let mut backend = tiny(256);
        let digest_before = backend.base_digest();
        let (_, _) =
            train_task_concept(&mut backend, "t", &[pair("p", "abab", "baba")], &cfg).unwrap();
        assert_eq!(backend.base_digest(), digest_before);
    }

    #[test]
    fn single_pair_training_reduces_loss() {
        let cfg = TrainingConfig {
            c: 4,
            epochs: 40,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 2,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        };
        let mut backend = tiny(256);
        let (_, trace) =
            train_task_concept(&mut backend, "t", &[pair("p", "ab ab", "cdcd")], &cfg).unwrap();
        assert!(trace.final_loss < trace.losses[0].1);
    }

    #[test]
    fn batch_loss_is_mean_of_pair_losses() {
        // On the uniform stub the loss is |mask| * ln(V) regardless of rows,
        // so the batch mean is exactly the mean of per-pair losses.
        let mut backend = text_stub();
        let pairs = vec![pair("a", "ab", "x"), pair("b", "cdef", "yz")];
        let cfg = TrainingConfig {
            c: 2,
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 2,
            seed: 0,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        };
        let (theta, trace) = train_task_concept(&mut backend, "t", &pairs, &cfg).unwrap();
        let mut per_pair = Vec::new();
        for p in &pairs {
            let (seq, mask) = assemble_training_sequence(&backend, &theta, p).unwrap();
            per_pair.push(backend.concept_loss_and_gradient(&seq, &mask).unwrap().0);
        }
        let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
        assert_eq!(trace.losses[1].1, mean);
    }

    #[test]
    fn early_stopping_truncates_the_run() {
        // Stub loss never improves, so patience 3 stops after 1 + 3 steps.
        let mut backend = text_stub();
        let pairs: Vec<DemonstrationPair> =
            (0..8).map(|i| pair(&format!("p{i}"), "ab", "x")).collect();
        let cfg = TrainingConfig {
            c: 1,
            epochs: 100,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 0,
            early_stop_patience: Some(3),
            init: InitRule::CopyVocabRow,
        };
        let (_, trace) = train_task_concept(&mut backend, "t", &pairs, &cfg).unwrap();
        // Initial eval plus three stale steps: the first step already ties
        // the initial loss, so patience runs out at step 3.
        assert_eq!(trace.losses.len(), 1 + 3);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = TrainingConfig {
            c: 3,
            epochs: 2,
            learning_rate: 0.1,
            batch_size: 1,
            seed: 9,
            early_stop_patience: None,
            init: InitRule::CopyVocabRow,
        };
        let mut backend = tiny(256);
        let (theta, _) =
            train_task_concept(&mut backend, "t", &[pair("p", "abc", "def")], &cfg).unwrap();
        let rows_before = backend.task_rows("t").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dcpt");
        save_checkpoint(&backend, &theta, &path).unwrap();

        let mut fresh = tiny(256);
        let loaded = load_checkpoint(&mut fresh, &path).unwrap();
        assert_eq!(loaded.task_id, "t");
        assert_eq!(loaded.c, 3);
        assert_eq!(fresh.task_rows("t").unwrap(), rows_before);
        assert_eq!(loaded.checkpoint_ref.as_deref(), Some(path.as_path()));
    }

    #[test]
    fn checkpoint_refuses_mismatched_backend() {
        let cfg = TrainingConfig {
            c: 2,
            epochs: 0,
            ..TrainingConfig::default()
        };
        let mut backend = tiny(256);
        let (theta, _) =
            train_task_concept(&mut backend, "t", &[pair("p", "ab", "cd")], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dcpt");
        save_checkpoint(&backend, &theta, &path).unwrap();

        let mut other = TinyBackend::new(TinyConfig {
            init_seed: 999,
            ..TinyConfig::default()
        })
        .unwrap();
        assert!(matches!(
            load_checkpoint(&mut other, &path),
            Err(TrainingError::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn truncated_checkpoint_leaves_no_state() {
        let cfg = TrainingConfig {
            c: 2,
            epochs: 0,
            ..TrainingConfig::default()
        };
        let mut backend = tiny(256);
        let (theta, _) =
            train_task_concept(&mut backend, "t", &[pair("p", "ab", "cd")], &cfg).unwrap();
        let bytes = encode_checkpoint(&backend, &theta).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dcpt");
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();

        let mut fresh = tiny(256);
        assert!(matches!(
            load_checkpoint(&mut fresh, &path),
            Err(TrainingError::Parse(_))
        ));
        assert!(fresh.task_token_ids("t").is_none());
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        let mut backend = tiny(256);
        assert!(matches!(
            train_task_concept(&mut backend, "t", &[], &TrainingConfig::default()),
            Err(TrainingError::NoPairs)
        ));
    }
}
