//! The recommender: a pre-norm causal transformer over joint tokens whose
//! attention scores receive the aggregation and transition biases.
//!
//! Per head, `s_ij = q_i.k_j / sqrt(d_k) + beta * hba_ij + gamma * tre_ij`,
//! masked to real `j <= i`. Item scores reuse the item embedding table; a
//! linear head predicts the next behavior.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::RowContext;
use crate::dataio::Batch;
use crate::embedding::{self, category_dim, embed_row, EmbeddingTables};
use crate::hba::{hba_layer, HbaNames, HbaOutput, IntensitySplit};
use crate::numerics::init::{named_rng, xavier_uniform};
use crate::numerics::{softmax_row_in_place, Gradients, ParameterStore, Real, Tape, Tensor, Var};
use crate::schema::{BehaviorSchema, UserSequence};
use crate::tre::{self, tre_row, TreComponents, TreDims, TreOutput};
use crate::{Error, Result};

pub const FINAL_NORM_GAMMA: &str = "final_norm.gamma";
pub const FINAL_NORM_BETA: &str = "final_norm.beta";
pub const BEHAVIOR_HEAD_W: &str = "head.behavior.W";
pub const BEHAVIOR_HEAD_B: &str = "head.behavior.b";
/// Weight of the behavior cross-entropy in the training loss.
pub const BEHAVIOR_LOSS_WEIGHT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    /// Longest history window; also the size of the position table.
    pub max_len: usize,
    pub dropout: f64,
    pub enable_hba: bool,
    pub enable_tre: bool,
    pub intensity_split: IntensitySplit,
    pub tre_components: TreComponents,
    /// Standard deviation of the embedding tables at init.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 128,
            heads: 2,
            layers: 2,
            max_len: 50,
            dropout: 0.0,
            enable_hba: true,
            enable_tre: true,
            intensity_split: IntensitySplit::Full,
            tre_components: TreComponents::default(),
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("model.d = {} must be a positive multiple of model.heads = {}", self.d, self.heads));
        }
        if self.max_len == 0 {
            return bad("model.max_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout = {} must lie in [0, 1)", self.dropout));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad(format!("model.init_std = {} must be positive", self.init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Table sizes fixed by the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub items: usize,
    pub behaviors: usize,
    pub categories: usize,
}

/// Parameter names of one transformer block.
#[derive(Clone, Debug)]
pub struct LayerNames {
    pub norm1_gamma: String,
    pub norm1_beta: String,
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
    pub norm2_gamma: String,
    pub norm2_beta: String,
    pub ffn_w1: String,
    pub ffn_b1: String,
    pub ffn_w2: String,
    pub ffn_b2: String,
    pub beta: String,
    pub gamma: String,
    pub hba: HbaNames,
}

impl LayerNames {
    pub fn new(layer: usize) -> Self {
        let p = |s: &str| format!("layer{layer}.{s}");
        LayerNames {
            norm1_gamma: p("norm1.gamma"),
            norm1_beta: p("norm1.beta"),
            wq: p("attn.Wq"),
            wk: p("attn.Wk"),
            wv: p("attn.Wv"),
            wo: p("attn.Wo"),
            norm2_gamma: p("norm2.gamma"),
            norm2_beta: p("norm2.beta"),
            ffn_w1: p("ffn.W1"),
            ffn_b1: p("ffn.b1"),
            ffn_w2: p("ffn.W2"),
            ffn_b2: p("ffn.b2"),
            beta: p("integrate.beta"),
            gamma: p("integrate.gamma"),
            hba: HbaNames::new(layer),
        }
    }
}

/// False for parameters exempt from weight decay: normalization scales and
/// shifts and the scalar bias gates.
pub fn decays(name: &str) -> bool {
    !(name.contains("norm") || name.ends_with("integrate.beta") || name.ends_with("integrate.gamma") || name.contains("alpha"))
}

/// Intermediates of one sequence's forward pass.
#[derive(Clone, Debug)]
pub struct RowForward {
    /// Final normalized hidden states, `[L, d]`.
    pub hidden: Var,
    pub behavior_logits: Var,
    /// `[layer][head]` attention weights, `[L, L]` each.
    pub attention: Vec<Vec<Var>>,
    pub hba: Vec<HbaOutput>,
    pub tre: Option<TreOutput>,
}

/// Top-scored items and the next-behavior distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub items: Vec<(usize, T)>,
    pub behaviors: Vec<T>,
}

/// Uniform negatives without replacement, excluding the positive.
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    rng: ChaCha8Rng,
    count: usize,
}

impl NegativeSampler {
    pub fn new(rng: ChaCha8Rng, count: usize) -> Self {
        NegativeSampler { rng, count }
    }

    /// `[positive, negatives...]`. Asking for `catalog - 1` or more returns
    /// every other item in id order.
    pub fn candidates(&mut self, positive: usize, catalog: usize) -> Result<Vec<usize>> {
        if catalog <= 1 {
            return Err(Error::CatalogTooSmall(catalog));
        }
        let others = catalog - 1;
        let mut out = Vec::with_capacity(self.count.min(others) + 1);
        out.push(positive);
        let shift = |k: usize| if k >= positive { k + 1 } else { k };
        if self.count >= others {
            out.extend((0..others).map(shift));
        } else {
            out.extend(sample(&mut self.rng, others, self.count).into_iter().map(shift));
        }
        Ok(out)
    }

    /// Candidate lists for every target of every row, in row-major order.
    pub fn for_batch(&mut self, batch: &Batch, catalog: usize) -> Result<Vec<Vec<Vec<usize>>>> {
        (0..batch.rows()).map(|r| batch.row(r).targets.iter().flatten().map(|t| self.candidates(t.item, catalog)).collect()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    /// Per-behavior stratum after applying the configured split.
    pub intensity_bits: Vec<u8>,
    pub params: ParameterStore<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters. Bias gates start at zero, so the initial model is a
    /// plain causal transformer.
    pub fn new(config: ModelConfig, vocab: Vocab, schema: &BehaviorSchema, seed: u64) -> Result<Self> {
        let mut params = ParameterStore::new();
        let d = config.d;
        Self::tables(&config, vocab).register(&mut params, seed, config.init_std, config.enable_tre);
        for l in 0..config.layers {
            let n = LayerNames::new(l);
            for name in [&n.wq, &n.wk, &n.wv, &n.wo] {
                params.insert(name.as_str(), xavier_uniform(&[d, d], &mut named_rng(seed, name)));
            }
            params.insert(n.ffn_w1.as_str(), xavier_uniform(&[d, 4 * d], &mut named_rng(seed, &n.ffn_w1)));
            params.insert(n.ffn_w2.as_str(), xavier_uniform(&[4 * d, d], &mut named_rng(seed, &n.ffn_w2)));
            params.insert(n.ffn_b1.as_str(), Tensor::zeros(&[4 * d]));
            params.insert(n.ffn_b2.as_str(), Tensor::zeros(&[d]));
            for (g, b) in [(&n.norm1_gamma, &n.norm1_beta), (&n.norm2_gamma, &n.norm2_beta)] {
                params.insert(g.as_str(), Tensor::filled(&[d], T::one()));
                params.insert(b.as_str(), Tensor::zeros(&[d]));
            }
            if config.enable_hba {
                params.insert(n.beta.as_str(), Tensor::zeros(&[1]));
                n.hba.register(&mut params, d, seed);
            }
            if config.enable_tre {
                params.insert(n.gamma.as_str(), Tensor::zeros(&[1]));
            }
        }
        params.insert(FINAL_NORM_GAMMA, Tensor::filled(&[d], T::one()));
        params.insert(FINAL_NORM_BETA, Tensor::zeros(&[d]));
        params.insert(BEHAVIOR_HEAD_W, xavier_uniform(&[d, vocab.behaviors], &mut named_rng(seed, BEHAVIOR_HEAD_W)));
        params.insert(BEHAVIOR_HEAD_B, Tensor::zeros(&[vocab.behaviors]));
        if config.enable_tre {
            Self::tre_dims(&config, vocab).register(&mut params, seed);
        }
        Self::from_params(config, vocab, schema, params)
    }

    /// Wraps existing parameters after checking every expected tensor is
    /// present with the right shape.
    pub fn from_params(config: ModelConfig, vocab: Vocab, schema: &BehaviorSchema, params: ParameterStore<T>) -> Result<Self> {
        config.validate()?;
        if schema.len() != vocab.behaviors {
            return Err(Error::Config(format!("schema has {} behaviors but the model expects {}", schema.len(), vocab.behaviors)));
        }
        for (name, shape) in Self::expected_shapes(&config, vocab) {
            let t = params.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch { name, found: t.shape().to_vec(), expected: shape });
            }
        }
        let intensity_bits = match config.intensity_split {
            IntensitySplit::PurchaseOnly => schema.purchase_only().intensity_bits(),
            _ => schema.intensity_bits(),
        };
        Ok(Model { config, vocab, intensity_bits, params })
    }

    fn tables(config: &ModelConfig, vocab: Vocab) -> EmbeddingTables {
        EmbeddingTables {
            items: vocab.items,
            behaviors: vocab.behaviors,
            categories: vocab.categories,
            positions: config.max_len,
            d: config.d,
            category_dim: category_dim(config.d),
        }
    }

    fn tre_dims(config: &ModelConfig, vocab: Vocab) -> TreDims {
        TreDims {
            d: config.d,
            category_dim: category_dim(config.d),
            matching: config.d,
            behaviors: vocab.behaviors,
            max_len: config.max_len,
        }
    }

    /// Name and shape of every parameter this configuration owns.
    pub fn expected_shapes(config: &ModelConfig, vocab: Vocab) -> Vec<(String, Vec<usize>)> {
        let d = config.d;
        let mut out = Self::tables(config, vocab).shapes(config.enable_tre);
        for l in 0..config.layers {
            let n = LayerNames::new(l);
            for name in [&n.wq, &n.wk, &n.wv, &n.wo] {
                out.push((name.clone(), vec![d, d]));
            }
            out.push((n.ffn_w1.clone(), vec![d, 4 * d]));
            out.push((n.ffn_b1.clone(), vec![4 * d]));
            out.push((n.ffn_w2.clone(), vec![4 * d, d]));
            out.push((n.ffn_b2.clone(), vec![d]));
            for name in [&n.norm1_gamma, &n.norm1_beta, &n.norm2_gamma, &n.norm2_beta] {
                out.push((name.clone(), vec![d]));
            }
            if config.enable_hba {
                out.push((n.beta.clone(), vec![1]));
                out.extend(n.hba.shapes(d));
            }
            if config.enable_tre {
                out.push((n.gamma.clone(), vec![1]));
            }
        }
        out.push((FINAL_NORM_GAMMA.into(), vec![d]));
        out.push((FINAL_NORM_BETA.into(), vec![d]));
        out.push((BEHAVIOR_HEAD_W.into(), vec![d, vocab.behaviors]));
        out.push((BEHAVIOR_HEAD_B.into(), vec![vocab.behaviors]));
        if config.enable_tre {
            out.extend(Self::tre_dims(config, vocab).shapes().into_iter().map(|(n, s)| (n.to_string(), s)));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), vocab: self.vocab, intensity_bits: self.intensity_bits.clone(), params: self.params.cast() }
    }

    pub fn context(&self, batch: &Batch, row: usize) -> RowContext {
        RowContext::new(&batch.row(row), &self.intensity_bits)
    }

    /// Forward pass for one sequence on `tape`, which may hold a different
    /// store than `self.params` with the same layout. `dropout` switches on
    /// training-mode dropout.
    pub fn forward_row(&self, tape: &mut Tape<'_, T>, ctx: &RowContext, mut dropout: Option<&mut ChaCha8Rng>) -> RowForward {
        let cfg = &self.config;
        let emb = embed_row(tape, ctx);
        let tre = cfg.enable_tre.then(|| {
            let dims = Self::tre_dims(cfg, self.vocab);
            tre_row(tape, ctx, emb.items, emb.behaviors, &dims, cfg.tre_components)
        });
        let causal = ctx.causal();
        let mut h = self.dropout(tape, emb.tokens, dropout.as_deref_mut());
        let mut attention = Vec::with_capacity(cfg.layers);
        let mut hba = Vec::new();
        for l in 0..cfg.layers {
            let n = LayerNames::new(l);
            let hba_out = cfg.enable_hba.then(|| hba_layer(tape, h, emb.behaviors, emb.items, ctx, cfg.intensity_split, &n.hba));
            let mut biases = Vec::new();
            if let Some(out) = hba_out {
                let beta = tape.param(&n.beta);
                biases.push(tape.scale_by(out.bias, beta));
                hba.push(out);
            }
            if let Some(out) = tre {
                let gamma = tape.param(&n.gamma);
                biases.push(tape.scale_by(out.bias, gamma));
            }
            let (next, weights) = self.block(tape, h, &n, &biases, &causal, dropout.as_deref_mut());
            h = next;
            attention.push(weights);
        }
        self.finish(tape, h, attention, hba, tre)
    }

    /// The same network with every bias path removed from the code, used as
    /// a reference for the biased forward pass.
    pub fn vanilla_row(&self, tape: &mut Tape<'_, T>, ctx: &RowContext) -> RowForward {
        let emb = embed_row(tape, ctx);
        let causal = ctx.causal();
        let mut h = emb.tokens;
        let mut attention = Vec::new();
        for l in 0..self.config.layers {
            let (next, weights) = self.block(tape, h, &LayerNames::new(l), &[], &causal, None);
            h = next;
            attention.push(weights);
        }
        self.finish(tape, h, attention, Vec::new(), None)
    }

    fn finish(&self, tape: &mut Tape<'_, T>, h: Var, attention: Vec<Vec<Var>>, hba: Vec<HbaOutput>, tre: Option<TreOutput>) -> RowForward {
        let g = tape.param(FINAL_NORM_GAMMA);
        let b = tape.param(FINAL_NORM_BETA);
        let hidden = tape.layer_norm(h, g, b);
        let w = tape.param(BEHAVIOR_HEAD_W);
        let bb = tape.param(BEHAVIOR_HEAD_B);
        let logits = tape.matmul(hidden, w);
        let behavior_logits = tape.add_row(logits, bb);
        RowForward { hidden, behavior_logits, attention, hba, tre }
    }

    /// Pre-norm attention and feed-forward sub-blocks with residuals.
    fn block(
        &self,
        tape: &mut Tape<'_, T>,
        h: Var,
        n: &LayerNames,
        biases: &[Var],
        causal: &[bool],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> (Var, Vec<Var>) {
        let g1 = tape.param(&n.norm1_gamma);
        let b1 = tape.param(&n.norm1_beta);
        let x = tape.layer_norm(h, g1, b1);
        let (attn, weights) = self.attention(tape, x, n, biases, causal);
        let attn = self.dropout(tape, attn, dropout.as_deref_mut());
        let h = tape.add(h, attn);

        let g2 = tape.param(&n.norm2_gamma);
        let b2 = tape.param(&n.norm2_beta);
        let x = tape.layer_norm(h, g2, b2);
        let w1 = tape.param(&n.ffn_w1);
        let fb1 = tape.param(&n.ffn_b1);
        let w2 = tape.param(&n.ffn_w2);
        let fb2 = tape.param(&n.ffn_b2);
        let f = tape.matmul(x, w1);
        let f = tape.add_row(f, fb1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, fb2);
        let f = self.dropout(tape, f, dropout);
        (tape.add(h, f), weights)
    }

    /// Multi-head causal attention; `biases` are `[L, L]` terms added to every head's scores.
    pub fn attention(&self, tape: &mut Tape<'_, T>, x: Var, n: &LayerNames, biases: &[Var], causal: &[bool]) -> (Var, Vec<Var>) {
        let dk = self.config.head_dim();
        let wq = tape.param(&n.wq);
        let wk = tape.param(&n.wk);
        let wv = tape.param(&n.wv);
        let wo = tape.param(&n.wo);
        let q = tape.matmul(x, wq);
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let (lo, hi) = (head * dk, (head + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k, lo, hi);
            let vh = tape.slice_cols(v, lo, hi);
            let s = tape.matmul_nt(qh, kh);
            let mut s = tape.scale(s, scale);
            for &b in biases {
                s = tape.add(s, b);
            }
            let p = tape.masked_softmax(s, causal.to_vec());
            heads.push(tape.matmul(p, vh));
            weights.push(p);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        (tape.matmul(cat, wo), weights)
    }

    fn dropout(&self, tape: &mut Tape<'_, T>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = T::lit(1.0 / (1.0 - p));
                let mask = (0..tape.value(x).len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Training loss for one row, with item and behavior terms each weighted
    /// by `weight` per target. `candidates` holds one list per target.
    pub fn row_loss(
        &self,
        tape: &mut Tape<'_, T>,
        ctx_targets: &[Option<crate::dataio::Target>],
        fwd: &RowForward,
        candidates: Vec<Vec<usize>>,
        weight: T,
    ) -> Option<Var> {
        let positions: Vec<Option<usize>> = ctx_targets.iter().enumerate().filter(|(_, t)| t.is_some()).map(|(k, _)| Some(k)).collect();
        if positions.is_empty() {
            return None;
        }
        let count = positions.len();
        let h = tape.gather(fwd.hidden, positions.clone());
        let table = tape.param(embedding::ITEM);
        let item_logits = tape.candidate_logits(h, table, candidates);
        let item_loss = tape.softmax_xent(item_logits, vec![0; count], vec![weight; count]);

        let b = tape.gather(fwd.behavior_logits, positions);
        let behavior_targets = ctx_targets.iter().flatten().map(|t| t.behavior).collect();
        let bw = weight * T::lit(BEHAVIOR_LOSS_WEIGHT);
        let behavior_loss = tape.softmax_xent(b, behavior_targets, vec![bw; count]);
        Some(tape.add(item_loss, behavior_loss))
    }

    /// Mean loss over every target in `batch` and its gradients, computed on
    /// `store` (normally `self.params`). Rows run in parallel and gradients
    /// are merged in row order.
    ///
    /// `candidates` comes from [`NegativeSampler::for_batch`]; `dropout_seed`
    /// enables dropout with a per-row stream.
    pub fn loss_and_grads(
        &self,
        store: &ParameterStore<T>,
        batch: &Batch,
        candidates: Vec<Vec<Vec<usize>>>,
        dropout_seed: Option<u64>,
    ) -> (T, Gradients<T>) {
        let total = batch.target_count();
        if total == 0 {
            return (T::zero(), Gradients::default());
        }
        let weight = T::one() / T::lit(total as f64);
        let per_row: Vec<(T, Gradients<T>)> = candidates
            .into_par_iter()
            .enumerate()
            .map(|(r, cands)| {
                let ctx = self.context(batch, r);
                let mut tape = Tape::new(store);
                let mut rng = dropout_seed.map(|s| named_rng(s, &format!("dropout.row{r}")));
                let fwd = self.forward_row(&mut tape, &ctx, rng.as_mut());
                match self.row_loss(&mut tape, batch.row(r).targets, &fwd, cands, weight) {
                    Some(loss) => (tape.value(loss).data()[0], tape.backward(loss)),
                    None => (T::zero(), Gradients::default()),
                }
            })
            .collect();
        let mut loss = T::zero();
        let mut grads = Gradients::default();
        for (l, g) in per_row {
            loss += l;
            grads.merge(g);
        }
        (loss, grads)
    }

    /// Final hidden states `[rows, L, d]` and behavior logits `[rows, L, |B|]` in eval mode.
    pub fn forward(&self, batch: &Batch) -> (Tensor<T>, Tensor<T>) {
        let rows: Vec<(Vec<T>, Vec<T>)> = (0..batch.rows())
            .into_par_iter()
            .map(|r| {
                let ctx = self.context(batch, r);
                let mut tape = Tape::new(&self.params);
                let fwd = self.forward_row(&mut tape, &ctx, None);
                (tape.value(fwd.hidden).data().to_vec(), tape.value(fwd.behavior_logits).data().to_vec())
            })
            .collect();
        let (n, d, b) = (batch.len, self.config.d, self.vocab.behaviors);
        let mut hidden = Vec::with_capacity(batch.rows() * n * d);
        let mut logits = Vec::with_capacity(batch.rows() * n * b);
        for (h, l) in rows {
            hidden.extend(h);
            logits.extend(l);
        }
        (Tensor::from_vec(&[batch.rows(), n, d], hidden), Tensor::from_vec(&[batch.rows(), n, b], logits))
    }

    /// Dot product of `hidden` with every item embedding.
    pub fn score_items(&self, hidden: &[T]) -> Vec<T> {
        let table = self.params.value(embedding::ITEM);
        (0..table.rows()).map(|v| table.row(v).iter().zip(hidden).map(|(&a, &b)| a * b).sum()).collect()
    }

    /// Item scores and behavior logits at the last interaction of `seq`
    /// (truncated to the most recent `max_len`).
    pub fn score_next(&self, seq: &UserSequence) -> Result<(Vec<T>, Vec<T>)> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let batch = Batch::from_sequences(&[seq], self.config.max_len);
        let ctx = self.context(&batch, 0);
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward_row(&mut tape, &ctx, None);
        let last = ctx.last_valid().expect("non-empty sequence");
        let hidden = tape.value(fwd.hidden).row(last).to_vec();
        let logits = tape.value(fwd.behavior_logits).row(last).to_vec();
        Ok((self.score_items(&hidden), logits))
    }

    /// [`Model::score_next`] for many sequences in parallel, in input order.
    pub fn score_many(&self, seqs: &[&UserSequence]) -> Result<Vec<(Vec<T>, Vec<T>)>> {
        seqs.par_iter().map(|s| self.score_next(s)).collect()
    }

    /// Top `top_k` items by descending score (ties to the lower id) and the
    /// softmax over behaviors.
    pub fn predict_next(&self, seq: &UserSequence, top_k: usize) -> Result<Prediction<T>> {
        let (scores, mut behaviors) = self.score_next(seq)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order.truncate(top_k);
        let all = vec![true; behaviors.len()];
        softmax_row_in_place(&mut behaviors, &all);
        Ok(Prediction { items: order.into_iter().map(|v| (v, scores[v])).collect(), behaviors })
    }

    /// TRE bias for a batch, `[rows, L, L]`; all zeros when TRE is disabled.
    pub fn transition_bias(&self, batch: &Batch) -> Tensor<T> {
        if !self.config.enable_tre {
            return Tensor::zeros(&[batch.rows(), batch.len, batch.len]);
        }
        let dims = Self::tre_dims(&self.config, self.vocab);
        tre::transition_bias_batch(batch, &self.params, &self.intensity_bits, &dims, self.config.tre_components)
    }
}
