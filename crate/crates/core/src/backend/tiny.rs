//! A small causal transformer language model, trained from scratch on CPU.
//!
//! Character-level tokenizer, learned positional embeddings, pre-LayerNorm
//! attention/MLP blocks, and a tied unembedding: logits are the dot product
//! of the final hidden states with the (extended) token embedding matrix.
//! Tying is what lets a trained concept row also act as a prediction
//! target when scoring appends concept tokens after a demonstration.
//!
//! All math runs in f64. Concept rows are stored at f32 (the checkpoint
//! width) and widened on use; base weights live in f64 and are mutated only
//! by [`TinyBackend::pretrain_base`], which is a construction-time step —
//! every concept operation leaves [`ModelBackend::base_digest`] unchanged.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::stub::validate_mask;
use super::tokenizer::{CharTokenizer, DEFAULT_ALPHABET};
use super::{
    earliest_stop, sample_token, BackendDescriptor, BackendError, EmbeddingExtension, InitRule,
    ModelBackend, RowGradients, SamplingConfig, Segment, TaskBlock, TokenId, TokenSequence,
};

const LN_EPS: f64 = 1e-5;

fn default_alphabet() -> String {
    DEFAULT_ALPHABET.to_string()
}
fn default_dim() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_ff() -> usize {
    64
}
fn default_max_seq() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyConfig {
    #[serde(default = "default_alphabet")]
    pub alphabet: String,
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_ff")]
    pub ff_dim: usize,
    #[serde(default = "default_max_seq")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            alphabet: default_alphabet(),
            embedding_dim: default_dim(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            ff_dim: default_ff(),
            max_seq_len: default_max_seq(),
            init_seed: 0,
        }
    }
}

impl TinyConfig {
    fn validate(&self) -> Result<(), BackendError> {
        if self.embedding_dim == 0 || self.n_layers == 0 || self.ff_dim == 0 || self.max_seq_len == 0
        {
            return Err(BackendError::Config("all dimensions must be >= 1".into()));
        }
        if self.n_heads == 0 || self.embedding_dim % self.n_heads != 0 {
            return Err(BackendError::Config(format!(
                "embedding_dim {} must be divisible by n_heads {}",
                self.embedding_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Base-model training knobs for [`TinyBackend::pretrain_base`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerGrads {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl LayerGrads {
    fn zeros(d: usize, ff: usize) -> Self {
        LayerGrads {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, ff)),
            b1: Array1::zeros(ff),
            w2: Array2::zeros((ff, d)),
            b2: Array1::zeros(d),
        }
    }
}

/// Gradients for every base parameter plus any scoped concept rows.
struct BaseGrads {
    tok_embed: Array2<f64>,
    pos_embed: Array2<f64>,
    layers: Vec<LayerGrads>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    ext_rows: std::collections::BTreeMap<TokenId, Array1<f64>>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    f1: Array2<f64>,
    r: Array2<f64>,
}

struct ForwardCache {
    support: Vec<TokenId>,
    sup_rows: Array2<f64>,
    ids: Vec<TokenId>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    y: Array2<f64>,
    logits: Array2<f64>,
}

pub struct TinyBackend {
    config: TinyConfig,
    tokenizer: CharTokenizer,
    tok_embed: Array2<f64>,
    pos_embed: Array2<f64>,
    layers: Vec<Layer>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    extension: EmbeddingExtension,
}

impl TinyBackend {
    pub fn new(config: TinyConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let tokenizer = CharTokenizer::new(&config.alphabet)?;
        let base_vocab = tokenizer.vocab_size();
        let d = config.embedding_dim;
        let ff = config.ff_dim;

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let init2 = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
        };

        let tok_embed = init2(base_vocab, d, &mut rng);
        let pos_embed = init2(config.max_seq_len, d, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: init2(d, d, &mut rng),
                wk: init2(d, d, &mut rng),
                wv: init2(d, d, &mut rng),
                wo: init2(d, d, &mut rng),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: init2(d, ff, &mut rng),
                b1: Array1::zeros(ff),
                w2: init2(ff, d, &mut rng),
                b2: Array1::zeros(d),
            });
        }

        Ok(TinyBackend {
            extension: EmbeddingExtension::new(base_vocab, d),
            config,
            tokenizer,
            tok_embed,
            pos_embed,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
        })
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    fn check_budget(&self, len: usize) -> Result<(), BackendError> {
        if len > self.config.max_seq_len {
            return Err(BackendError::ContextOverflow {
                length: len,
                budget: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Support ids and their (tied) embedding matrix for a scope, widening
    /// the scoped task's f32 rows — or substituting `override_rows` on the
    /// f64 reference path used by finite-difference checks.
    fn support_matrix(
        &self,
        scope: Option<&TaskBlock>,
        override_rows: Option<&Array2<f64>>,
    ) -> Result<(Vec<TokenId>, Array2<f64>), BackendError> {
        let support = self.extension.support(scope);
        let d = self.config.embedding_dim;
        let base = self.extension.base_vocab_size();
        let mut rows = Array2::zeros((support.len(), d));
        rows.slice_mut(ndarray::s![..base, ..])
            .assign(&self.tok_embed);
        if let Some(block) = scope {
            match override_rows {
                Some(over) => {
                    if over.dim() != block.rows.dim() {
                        return Err(BackendError::RowShape {
                            expected: block.rows.dim(),
                            got: over.dim(),
                        });
                    }
                    rows.slice_mut(ndarray::s![base.., ..]).assign(over);
                }
                None => {
                    for (j, row) in block.rows.outer_iter().enumerate() {
                        for (x, &w) in rows.row_mut(base + j).iter_mut().zip(row.iter()) {
                            *x = w as f64;
                        }
                    }
                }
            }
        }
        Ok((support, rows))
    }

    fn sup_index(&self, scope: Option<&TaskBlock>, id: TokenId) -> usize {
        let base = self.extension.base_vocab_size();
        if (id as usize) < base {
            id as usize
        } else {
            let block = scope.expect("scoped id requires scope");
            base + (id - block.first_id) as usize
        }
    }

    fn forward(
        &self,
        ids: &[TokenId],
        override_rows: Option<&Array2<f64>>,
    ) -> Result<ForwardCache, BackendError> {
        self.check_budget(ids.len())?;
        let scope = self.extension.task_scope(ids)?;
        if override_rows.is_some() && scope.is_none() {
            return Err(BackendError::Config(
                "row override requires a task-scoped sequence".into(),
            ));
        }
        let (support, sup_rows) = self.support_matrix(scope, override_rows)?;

        let t = ids.len();
        let d = self.config.embedding_dim;
        let nh = self.config.n_heads;
        let dh = d / nh;

        let mut x = Array2::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            let row = self.sup_index(scope, id);
            let mut xi = x.row_mut(i);
            xi.assign(&sup_rows.row(row));
            xi += &self.pos_embed.row(i);
        }

        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x_in = x.clone();
            let (a, ln1) = layer_norm(&x_in, &layer.ln1_g, &layer.ln1_b);
            let q = a.dot(&layer.wq);
            let k = a.dot(&layer.wk);
            let v = a.dot(&layer.wv);

            let mut ctx = Array2::zeros((t, d));
            let mut attn = Vec::with_capacity(nh);
            for h in 0..nh {
                let cols = ndarray::s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut scores = qh.dot(&kh.t());
                scores /= (dh as f64).sqrt();
                for i in 0..t {
                    for j in (i + 1)..t {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                let probs = softmax_rows(&scores);
                ctx.slice_mut(cols).assign(&probs.dot(&vh));
                attn.push(probs);
            }
            let attn_out = ctx.dot(&layer.wo);
            let x_mid = &x_in + &attn_out;

            let (b, ln2) = layer_norm(&x_mid, &layer.ln2_g, &layer.ln2_b);
            let f1 = b.dot(&layer.w1) + &layer.b1;
            let r = f1.mapv(gelu);
            let f2 = r.dot(&layer.w2) + &layer.b2;
            x = &x_mid + &f2;

            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                attn,
                ctx,
                ln2,
                b,
                f1,
                r,
            });
        }

        let (y, lnf) = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let logits = y.dot(&sup_rows.t());

        Ok(ForwardCache {
            support,
            sup_rows,
            ids: ids.to_vec(),
            layers: layer_caches,
            lnf,
            y,
            logits,
        })
    }

    /// Log-probabilities `log P(ids[i] | ids[..i])` for `i >= 1`.
    fn logprobs_from_cache(&self, cache: &ForwardCache) -> Vec<f64> {
        let scope = self
            .extension
            .task_scope(&cache.ids)
            .expect("validated in forward");
        (1..cache.ids.len())
            .map(|i| {
                let row = cache.logits.row(i - 1);
                let lse = log_sum_exp(row.as_slice().expect("contiguous"));
                row[self.sup_index(scope, cache.ids[i])] - lse
            })
            .collect()
    }

    /// Backprop from `dlogits` down to every parameter, including the token
    /// embedding contributions from both input positions and the tied
    /// unembedding.
    fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> BaseGrads {
        let t = cache.ids.len();
        let d = self.config.embedding_dim;
        let nh = self.config.n_heads;
        let dh = d / nh;
        let ff = self.config.ff_dim;
        let base = self.extension.base_vocab_size();
        let scope = self
            .extension
            .task_scope(&cache.ids)
            .expect("validated in forward");

        let mut grads = BaseGrads {
            tok_embed: Array2::zeros(self.tok_embed.dim()),
            pos_embed: Array2::zeros(self.pos_embed.dim()),
            layers: (0..self.layers.len())
                .map(|_| LayerGrads::zeros(d, ff))
                .collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            ext_rows: std::collections::BTreeMap::new(),
        };

        // Tied unembedding: logits = y · E_sup^T.
        let dy = dlogits.dot(&cache.sup_rows);
        let mut d_sup = dlogits.t().dot(&cache.y);

        let mut dx = ln_backward(&dy, &cache.lnf, &self.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

        for (li, layer) in self.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];
            let lg = &mut grads.layers[li];

            // MLP block: x = x_mid + relu(LN2(x_mid)·W1 + b1)·W2 + b2
            let df2 = dx.clone();
            lg.w2 += &lc.r.t().dot(&df2);
            lg.b2 += &df2.sum_axis(Axis(0));
            let dr = df2.dot(&layer.w2.t());
            let df1 = &dr * &lc.f1.mapv(gelu_prime);
            lg.w1 += &lc.b.t().dot(&df1);
            lg.b1 += &df1.sum_axis(Axis(0));
            let db = df1.dot(&layer.w1.t());
            let mut dx_mid = dx; // residual path
            dx_mid += &ln_backward(&db, &lc.ln2, &layer.ln2_g, &mut lg.ln2_g, &mut lg.ln2_b);

            // Attention block: x_mid = x_in + (heads(LN1(x_in)))·Wo
            let dattn_out = dx_mid.clone();
            lg.wo += &lc.ctx.t().dot(&dattn_out);
            let dctx = dattn_out.dot(&layer.wo.t());

            let mut dq = Array2::zeros((t, d));
            let mut dk = Array2::zeros((t, d));
            let mut dv = Array2::zeros((t, d));
            for h in 0..nh {
                let cols = ndarray::s![.., h * dh..(h + 1) * dh];
                let probs = &lc.attn[h];
                let dctx_h = dctx.slice(cols);
                let vh = lc.v.slice(cols);
                let qh = lc.q.slice(cols);
                let kh = lc.k.slice(cols);

                let dprobs = dctx_h.dot(&vh.t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));

                // softmax rows backward; masked entries have prob 0.
                let mut dscores = Array2::zeros((t, t));
                for i in 0..t {
                    let p = probs.row(i);
                    let dp = dprobs.row(i);
                    let dot: f64 = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..=i {
                        dscores[[i, j]] = (dp[j] - dot) * p[j];
                    }
                }
                dscores /= (dh as f64).sqrt();
                dq.slice_mut(cols).assign(&dscores.dot(&kh));
                dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
            }

            let mut da = dq.dot(&layer.wq.t());
            da += &dk.dot(&layer.wk.t());
            da += &dv.dot(&layer.wv.t());
            lg.wq += &lc.a.t().dot(&dq);
            lg.wk += &lc.a.t().dot(&dk);
            lg.wv += &lc.a.t().dot(&dv);

            let mut dx_in = dx_mid; // residual path
            dx_in += &ln_backward(&da, &lc.ln1, &layer.ln1_g, &mut lg.ln1_g, &mut lg.ln1_b);
            dx = dx_in;
        }

        // Input embeddings: x0[i] = E_sup[idx(id_i)] + pos[i].
        for (i, &id) in cache.ids.iter().enumerate() {
            let row = self.sup_index(scope, id);
            {
                let mut s = d_sup.row_mut(row);
                s += &dx.row(i);
            }
            let mut p = grads.pos_embed.row_mut(i);
            p += &dx.row(i);
        }

        // Split the support gradient into base rows and concept rows.
        for (row, &id) in cache.support.iter().enumerate() {
            if (id as usize) < base {
                let mut g = grads.tok_embed.row_mut(id as usize);
                g += &d_sup.row(row);
            } else {
                grads
                    .ext_rows
                    .entry(id)
                    .or_insert_with(|| Array1::zeros(d))
                    .scaled_add(1.0, &d_sup.row(row));
            }
        }

        grads
    }

    /// Loss and dlogits for next-token prediction at the masked target
    /// positions. `target_mask` holds indices `i >= 1`; the prediction uses
    /// the hidden state at `i - 1`.
    fn loss_and_dlogits(
        &self,
        cache: &ForwardCache,
        target_mask: &[usize],
    ) -> (f64, Array2<f64>) {
        let scope = self
            .extension
            .task_scope(&cache.ids)
            .expect("validated in forward");
        let mut dlogits = Array2::zeros(cache.logits.dim());
        let mut loss = 0.0;
        for &pos in target_mask {
            let row = cache.logits.row(pos - 1);
            let slice = row.as_slice().expect("contiguous");
            let lse = log_sum_exp(slice);
            let target = self.sup_index(scope, cache.ids[pos]);
            loss += lse - row[target];
            let mut drow = dlogits.row_mut(pos - 1);
            for (j, &l) in slice.iter().enumerate() {
                drow[j] += (l - lse).exp();
            }
            drow[target] -= 1.0;
        }
        (loss, dlogits)
    }

    /// Reference-path loss evaluation with caller-supplied f64 concept rows
    /// for the scoped task; used by finite-difference gradient checks.
    pub fn concept_loss_with_rows(
        &self,
        seq: &TokenSequence,
        target_mask: &[usize],
        rows: &Array2<f64>,
    ) -> Result<f64, BackendError> {
        validate_mask(seq, target_mask)?;
        let cache = self.forward(&seq.token_ids, Some(rows))?;
        Ok(self.loss_and_dlogits(&cache, target_mask).0)
    }

    /// Train the base model as a plain language model on the given texts,
    /// then leave it frozen. Deterministic given the config seed; call
    /// before any concept extension.
    pub fn pretrain_base(
        &mut self,
        texts: &[String],
        cfg: &PretrainConfig,
    ) -> Result<Vec<f64>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::Config("no pretraining texts".into()));
        }
        if self.extension.total_added() > 0 {
            return Err(BackendError::Config(
                "pretraining must happen before concept extension".into(),
            ));
        }
        let mut sequences = Vec::with_capacity(texts.len());
        for text in texts {
            let mut ids = self.tokenizer.encode(text)?;
            ids.push(self.tokenizer.eot_id());
            self.check_budget(ids.len())?;
            if ids.len() < 2 {
                return Err(BackendError::Config("pretraining text too short".into()));
            }
            sequences.push(ids);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_params = self.count_base_params();
        let mut opt = Adam::new(n_params, cfg.learning_rate);
        let mut losses = Vec::with_capacity(cfg.steps);

        let mut order: Vec<usize> = (0..sequences.len()).collect();
        let mut cursor = order.len();
        for _ in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                if cursor >= order.len() {
                    shuffle(&mut order, &mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            let mut total = BaseGrads {
                tok_embed: Array2::zeros(self.tok_embed.dim()),
                pos_embed: Array2::zeros(self.pos_embed.dim()),
                layers: (0..self.layers.len())
                    .map(|_| LayerGrads::zeros(self.config.embedding_dim, self.config.ff_dim))
                    .collect(),
                lnf_g: Array1::zeros(self.config.embedding_dim),
                lnf_b: Array1::zeros(self.config.embedding_dim),
                ext_rows: Default::default(),
            };
            let mut loss_sum = 0.0;
            let mut target_count = 0usize;
            for &si in &batch {
                let ids = &sequences[si];
                let cache = self.forward(ids, None)?;
                let mask: Vec<usize> = (1..ids.len()).collect();
                let (loss, dlogits) = self.loss_and_dlogits(&cache, &mask);
                let g = self.backward(&cache, &dlogits);
                accumulate(&mut total, &g);
                loss_sum += loss;
                target_count += mask.len();
            }
            let scale = 1.0 / target_count as f64;
            scale_grads(&mut total, scale);
            clip_global_norm(&mut total, 1.0);
            let step_loss = loss_sum * scale;
            if !step_loss.is_finite() {
                return Err(BackendError::Config(format!(
                    "pretraining diverged: loss {step_loss}"
                )));
            }
            losses.push(step_loss);
            opt.step(self, &total);
        }
        Ok(losses)
    }

    fn count_base_params(&self) -> usize {
        let mut n = 0;
        self.visit_base_params_ro(&mut |len| n += len);
        n
    }

    fn visit_base_params_ro(&self, f: &mut impl FnMut(usize)) {
        f(self.tok_embed.len());
        f(self.pos_embed.len());
        for layer in &self.layers {
            f(layer.ln1_g.len());
            f(layer.ln1_b.len());
            f(layer.wq.len());
            f(layer.wk.len());
            f(layer.wv.len());
            f(layer.wo.len());
            f(layer.ln2_g.len());
            f(layer.ln2_b.len());
            f(layer.w1.len());
            f(layer.b1.len());
            f(layer.w2.len());
            f(layer.b2.len());
        }
        f(self.lnf_g.len());
        f(self.lnf_b.len());
    }
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

fn accumulate(total: &mut BaseGrads, g: &BaseGrads) {
    total.tok_embed += &g.tok_embed;
    total.pos_embed += &g.pos_embed;
    for (t, s) in total.layers.iter_mut().zip(&g.layers) {
        t.ln1_g += &s.ln1_g;
        t.ln1_b += &s.ln1_b;
        t.wq += &s.wq;
        t.wk += &s.wk;
        t.wv += &s.wv;
        t.wo += &s.wo;
        t.ln2_g += &s.ln2_g;
        t.ln2_b += &s.ln2_b;
        t.w1 += &s.w1;
        t.b1 += &s.b1;
        t.w2 += &s.w2;
        t.b2 += &s.b2;
    }
    total.lnf_g += &g.lnf_g;
    total.lnf_b += &g.lnf_b;
}

fn scale_grads(g: &mut BaseGrads, s: f64) {
    g.tok_embed *= s;
    g.pos_embed *= s;
    for l in &mut g.layers {
        l.ln1_g *= s;
        l.ln1_b *= s;
        l.wq *= s;
        l.wk *= s;
        l.wv *= s;
        l.wo *= s;
        l.ln2_g *= s;
        l.ln2_b *= s;
        l.w1 *= s;
        l.b1 *= s;
        l.w2 *= s;
        l.b2 *= s;
    }
    g.lnf_g *= s;
    g.lnf_b *= s;
}

fn grad_sq_norm(g: &BaseGrads) -> f64 {
    let mut n = 0.0;
    let mut add = |xs: &[f64]| n += xs.iter().map(|x| x * x).sum::<f64>();
    add(g.tok_embed.as_slice().unwrap());
    add(g.pos_embed.as_slice().unwrap());
    for l in &g.layers {
        add(l.ln1_g.as_slice().unwrap());
        add(l.ln1_b.as_slice().unwrap());
        add(l.wq.as_slice().unwrap());
        add(l.wk.as_slice().unwrap());
        add(l.wv.as_slice().unwrap());
        add(l.wo.as_slice().unwrap());
        add(l.ln2_g.as_slice().unwrap());
        add(l.ln2_b.as_slice().unwrap());
        add(l.w1.as_slice().unwrap());
        add(l.b1.as_slice().unwrap());
        add(l.w2.as_slice().unwrap());
        add(l.b2.as_slice().unwrap());
    }
    add(g.lnf_g.as_slice().unwrap());
    add(g.lnf_b.as_slice().unwrap());
    n
}

fn clip_global_norm(g: &mut BaseGrads, max_norm: f64) {
    let norm = grad_sq_norm(g).sqrt();
    if norm > max_norm {
        scale_grads(g, max_norm / norm);
    }
}

/// Adam over the flat base-parameter vector, iterated in a fixed order.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    lr: f64,
    t: u64,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            lr,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut TinyBackend, grads: &BaseGrads) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        let lr = self.lr;
        let mut idx = 0usize;
        let mut update = |w: &mut f64, g: f64, m: &mut [f64], v: &mut [f64]| {
            m[idx] = B1 * m[idx] + (1.0 - B1) * g;
            v[idx] = B2 * v[idx] + (1.0 - B2) * g * g;
            let mhat = m[idx] / bc1;
            let vhat = v[idx] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + EPS);
            idx += 1;
        };

        macro_rules! tensor {
            ($w:expr, $g:expr) => {
                for (w, &g) in $w.iter_mut().zip($g.iter()) {
                    update(w, g, &mut self.m, &mut self.v);
                }
            };
        }
        tensor!(model.tok_embed, grads.tok_embed);
        tensor!(model.pos_embed, grads.pos_embed);
        for (layer, lg) in model.layers.iter_mut().zip(&grads.layers) {
            tensor!(layer.ln1_g, lg.ln1_g);
            tensor!(layer.ln1_b, lg.ln1_b);
            tensor!(layer.wq, lg.wq);
            tensor!(layer.wk, lg.wk);
            tensor!(layer.wv, lg.wv);
            tensor!(layer.wo, lg.wo);
            tensor!(layer.ln2_g, lg.ln2_g);
            tensor!(layer.ln2_b, lg.ln2_b);
            tensor!(layer.w1, lg.w1);
            tensor!(layer.b1, lg.b1);
            tensor!(layer.w2, lg.w2);
            tensor!(layer.b2, lg.b2);
        }
        tensor!(model.lnf_g, grads.lnf_g);
        tensor!(model.lnf_b, grads.lnf_b);
        debug_assert_eq!(idx, self.m.len());
    }
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut out = Array2::zeros((t, d));
    let mut xhat = Array2::zeros((t, d));
    let mut inv = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mu = row.mean().expect("nonempty row");
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let iv = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = iv;
        for j in 0..d {
            let xh = (row[j] - mu) * iv;
            xhat[[i, j]] = xh;
            out[[i, j]] = g[j] * xh + b[j];
        }
    }
    (out, LnCache { xhat, inv })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
        }
        let dxhat: Vec<f64> = (0..d).map(|j| dyr[j] * g[j]).collect();
        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat: f64 =
            dxhat.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[[i, j]] = cache.inv[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// GELU with the tanh approximation; smooth, so finite-difference checks
/// are clean everywhere.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let (t, n) = scores.dim();
    let mut out = Array2::zeros((t, n));
    for i in 0..t {
        let row = scores.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..n {
            out[[i, j]] /= sum;
        }
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl ModelBackend for TinyBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            model_fingerprint: self.base_digest(),
            embedding_dim: self.config.embedding_dim,
            base_vocab_size: self.extension.base_vocab_size(),
            determinism_seed: self.config.init_seed,
        }
    }

    fn context_budget(&self) -> usize {
        self.config.max_seq_len
    }

    fn base_vocab_size(&self) -> usize {
        self.extension.base_vocab_size()
    }

    fn vocab_size(&self) -> usize {
        self.extension.vocab_size()
    }

    fn eot_token(&self) -> Option<TokenId> {
        Some(self.tokenizer.eot_id())
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, BackendError> {
        let ids = self.tokenizer.encode(text)?;
        self.check_budget(ids.len())?;
        Ok(TokenSequence::from_ids(ids, Segment::Input))
    }

    fn detokenize(&self, ids: &[TokenId]) -> Result<String, BackendError> {
        self.tokenizer.decode(ids)
    }

    fn sequence_logprobs(&self, seq: &TokenSequence) -> Result<Vec<f64>, BackendError> {
        if seq.len() <= 1 {
            self.check_budget(seq.len())?;
            self.extension.task_scope(&seq.token_ids)?;
            return Ok(Vec::new());
        }
        let cache = self.forward(&seq.token_ids, None)?;
        Ok(self.logprobs_from_cache(&cache))
    }

    fn sample_continuation(
        &self,
        prefix: &TokenSequence,
        cfg: &SamplingConfig,
        seed: u64,
    ) -> Result<TokenSequence, BackendError> {
        cfg.validate()?;
        if prefix.is_empty() {
            return Err(BackendError::InvalidSampling(
                "prefix must be nonempty".into(),
            ));
        }
        self.check_budget(prefix.len() + cfg.max_new_tokens)?;
        let scope = self.extension.task_scope(&prefix.token_ids)?;
        let support = self.extension.support(scope);
        let eot = self.tokenizer.eot_id();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut context = prefix.token_ids.clone();
        let mut generated: Vec<TokenId> = Vec::new();
        for _ in 0..cfg.max_new_tokens {
            let cache = self.forward(&context, None)?;
            let row = cache.logits.row(context.len() - 1);
            let slice = row.as_slice().expect("contiguous");
            let lse = log_sum_exp(slice);
            let items: Vec<(TokenId, f64)> = support
                .iter()
                .enumerate()
                .map(|(j, &id)| (id, slice[j] - lse))
                .collect();
            let next = sample_token(&items, cfg, &mut rng);
            if next == eot {
                break;
            }
            generated.push(next);
            context.push(next);

            if cfg.stop_sequences.iter().any(|s| !s.is_empty()) {
                let text = self.tokenizer.decode(&generated)?;
                if let Some(cut) = earliest_stop(&text, &cfg.stop_sequences) {
                    let kept = text[..cut].to_string();
                    let ids = self.tokenizer.encode(&kept)?;
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
        let d = self.config.embedding_dim;
        let base = self.extension.base_vocab_size();
        let rows = match init {
            InitRule::Zeros => Array2::zeros((c, d)),
            InitRule::CopyVocabRow => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut rows = Array2::zeros((c, d));
                for j in 0..c {
                    let src = rng.random_range(0..base);
                    for (x, &w) in rows.row_mut(j).iter_mut().zip(self.tok_embed.row(src)) {
                        *x = w as f32;
                    }
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
        let cache = self.forward(&seq.token_ids, None)?;
        let (loss, dlogits) = self.loss_and_dlogits(&cache, target_mask);
        let grads = self.backward(&cache, &dlogits);

        // Report rows for added tokens that appear in the sequence.
        let mut rows = RowGradients::new();
        for &id in &seq.token_ids {
            if (id as usize) >= self.extension.base_vocab_size() {
                if let Some(g) = grads.ext_rows.get(&id) {
                    rows.entry(id).or_insert_with(|| g.to_vec());
                }
            }
        }
        Ok((loss, rows))
    }

    fn base_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.tokenizer.alphabet().as_bytes());
        for dim in [
            self.config.embedding_dim,
            self.config.n_layers,
            self.config.n_heads,
            self.config.ff_dim,
            self.config.max_seq_len,
        ] {
            hasher.update((dim as u64).to_le_bytes());
        }
        let mut eat = |xs: &[f64]| {
            for x in xs {
                hasher.update(x.to_le_bytes());
            }
        };
        eat(self.tok_embed.as_slice().unwrap());
        eat(self.pos_embed.as_slice().unwrap());
        for layer in &self.layers {
            eat(layer.ln1_g.as_slice().unwrap());
            eat(layer.ln1_b.as_slice().unwrap());
            eat(layer.wq.as_slice().unwrap());
            eat(layer.wk.as_slice().unwrap());
            eat(layer.wv.as_slice().unwrap());
            eat(layer.wo.as_slice().unwrap());
            eat(layer.ln2_g.as_slice().unwrap());
            eat(layer.ln2_b.as_slice().unwrap());
            eat(layer.w1.as_slice().unwrap());
            eat(layer.b1.as_slice().unwrap());
            eat(layer.w2.as_slice().unwrap());
            eat(layer.b2.as_slice().unwrap());
        }
        eat(self.lnf_g.as_slice().unwrap());
        eat(self.lnf_b.as_slice().unwrap());
        hex::encode(hasher.finalize())
    }
}
