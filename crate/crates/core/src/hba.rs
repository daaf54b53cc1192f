//! Hierarchical behavior aggregation.
//!
//! History is split by behavior intensity into an exploration channel and a
//! commitment channel, each a masked single-head attention over the layer
//! input. The query's own stratum decides which channel is primary; a
//! sigmoid gate mixes primary and secondary dimension-wise, and a two-layer
//! tanh MLP over `[h_i | e_b(j) | e_v(j) | fused_i]` turns the result into a
//! causal attention bias.
//!
//! The bias MLP is evaluated in split form: its first layer is stored as four
//! `[d, d]` blocks, one per concatenated input, so the query-side and
//! key-side halves are projected once per position and summed per pair.

use serde::{Deserialize, Serialize};

use crate::context::{indicator, RowContext};
use crate::dataio::Batch;
use crate::numerics::init::{named_rng, xavier_uniform};
use crate::numerics::{ParameterStore, Real, Tape, Tensor, Var};

/// How behaviors are assigned to the two channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensitySplit {
    /// Schema partition.
    #[default]
    Full,
    /// Both channels see the full causal history.
    Uniform,
    /// Only `purchase` counts as commitment.
    PurchaseOnly,
}

impl IntensitySplit {
    pub fn as_str(self) -> &'static str {
        match self {
            IntensitySplit::Full => "full",
            IntensitySplit::Uniform => "none",
            IntensitySplit::PurchaseOnly => "purchase_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(IntensitySplit::Full),
            "none" | "uniform" => Some(IntensitySplit::Uniform),
            "purchase_only" => Some(IntensitySplit::PurchaseOnly),
            _ => None,
        }
    }
}

/// Parameter names of one layer's aggregation block.
#[derive(Clone, Debug)]
pub struct HbaNames {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub gate_w: String,
    pub gate_b: String,
    pub bias_wh: String,
    pub bias_wb: String,
    pub bias_wv: String,
    pub bias_wr: String,
    pub bias_b1: String,
    pub bias_w2: String,
    pub bias_b2: String,
}

impl HbaNames {
    pub fn new(layer: usize) -> Self {
        let p = |s: &str| format!("layer{layer}.hba.{s}");
        HbaNames {
            wq: p("Wq"),
            wk: p("Wk"),
            wv: p("Wv"),
            gate_w: p("gate.W"),
            gate_b: p("gate.b"),
            bias_wh: p("bias.W_h"),
            bias_wb: p("bias.W_b"),
            bias_wv: p("bias.W_v"),
            bias_wr: p("bias.W_r"),
            bias_b1: p("bias.b1"),
            bias_w2: p("bias.w2"),
            bias_b2: p("bias.b2"),
        }
    }

    pub fn shapes(&self, d: usize) -> Vec<(String, Vec<usize>)> {
        vec![
            (self.wq.clone(), vec![d, d]),
            (self.wk.clone(), vec![d, d]),
            (self.wv.clone(), vec![d, d]),
            (self.gate_w.clone(), vec![2 * d, d]),
            (self.gate_b.clone(), vec![d]),
            (self.bias_wh.clone(), vec![d, d]),
            (self.bias_wb.clone(), vec![d, d]),
            (self.bias_wv.clone(), vec![d, d]),
            (self.bias_wr.clone(), vec![d, d]),
            (self.bias_b1.clone(), vec![d]),
            (self.bias_w2.clone(), vec![d, 1]),
            (self.bias_b2.clone(), vec![1]),
        ]
    }

    /// Matrices get Xavier-uniform values, vectors start at zero.
    pub fn register<T: Real>(&self, store: &mut ParameterStore<T>, d: usize, seed: u64) {
        for (name, shape) in self.shapes(d) {
            let t = if shape.len() == 2 { xavier_uniform(&shape, &mut named_rng(seed, &name)) } else { Tensor::zeros(&shape) };
            store.insert(name, t);
        }
    }
}

/// Allowed-entry masks (`true` = attend) for the two channels, `L*L` each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntensityMasks {
    pub low: Vec<bool>,
    pub high: Vec<bool>,
}

/// `low[i][j]` iff `j <= i`, both real and `j` is exploration; `high` likewise
/// for commitment. Under [`IntensitySplit::Uniform`] both are the causal mask.
///
/// `ctx.intensity` must already reflect the split.
pub fn intensity_masks(ctx: &RowContext, split: IntensitySplit) -> IntensityMasks {
    let n = ctx.len;
    let causal = ctx.causal();
    if split == IntensitySplit::Uniform {
        return IntensityMasks { low: causal.clone(), high: causal };
    }
    let mut low = vec![false; n * n];
    let mut high = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            if !causal[i * n + j] {
                continue;
            }
            match ctx.intensity[j] {
                Some(0) => low[i * n + j] = true,
                Some(_) => high[i * n + j] = true,
                None => {}
            }
        }
    }
    IntensityMasks { low, high }
}

/// Additive masks (`0` allowed, `-inf` blocked) as `[rows, L, L]` tensors.
pub fn build_intensity_masks<T: Real>(batch: &Batch, intensity_bits: &[u8], split: IntensitySplit) -> (Tensor<T>, Tensor<T>) {
    let n = batch.len;
    let mut low = Vec::with_capacity(batch.rows() * n * n);
    let mut high = Vec::with_capacity(batch.rows() * n * n);
    let additive = |ok: bool| if ok { T::zero() } else { T::neg_infinity() };
    for r in 0..batch.rows() {
        let ctx = RowContext::new(&batch.row(r), intensity_bits);
        let m = intensity_masks(&ctx, split);
        low.extend(m.low.iter().map(|&ok| additive(ok)));
        high.extend(m.high.iter().map(|&ok| additive(ok)));
    }
    let shape = [batch.rows(), n, n];
    (Tensor::from_vec(&shape, low), Tensor::from_vec(&shape, high))
}

/// `softmax(H Wq (H Wk)^T / sqrt(d) | mask) H Wv`; rows with no allowed key are zero.
pub fn stratified_attention<T: Real>(tape: &mut Tape<'_, T>, h: Var, allowed: Vec<bool>, names: &HbaNames) -> Var {
    let d = tape.value(h).cols();
    let wq = tape.param(&names.wq);
    let wk = tape.param(&names.wk);
    let wv = tape.param(&names.wv);
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let probs = tape.masked_softmax(scores, allowed);
    tape.matmul(probs, v)
}

/// Exploration queries take the low channel as primary, commitment queries the high one.
pub fn route_self_cross<T: Real>(tape: &mut Tape<'_, T>, r_low: Var, r_high: Var, ctx: &RowContext) -> (Var, Var) {
    let d = tape.value(r_low).cols();
    let is_high: Vec<bool> = ctx.intensity.iter().map(|b| matches!(b, Some(x) if *x != 0)).collect();
    let mut high_sel = Vec::with_capacity(ctx.len * d);
    for &hi in &is_high {
        high_sel.extend(std::iter::repeat_n(if hi { T::one() } else { T::zero() }, d));
    }
    let low_sel: Vec<T> = high_sel.iter().map(|&x| T::one() - x).collect();

    let a = tape.mul_const(r_low, low_sel.clone());
    let b = tape.mul_const(r_high, high_sel.clone());
    let r_self = tape.add(a, b);
    let c = tape.mul_const(r_high, low_sel);
    let e = tape.mul_const(r_low, high_sel);
    let r_cross = tape.add(c, e);
    (r_self, r_cross)
}

/// `g = sigmoid([self | cross] W + b)`, `fused = g * self + (1 - g) * cross`.
pub fn moe_fuse<T: Real>(tape: &mut Tape<'_, T>, r_self: Var, r_cross: Var, names: &HbaNames) -> (Var, Var) {
    let w = tape.param(&names.gate_w);
    let b = tape.param(&names.gate_b);
    let both = tape.concat_cols(&[r_self, r_cross]);
    let pre = tape.matmul(both, w);
    let pre = tape.add_row(pre, b);
    let gate = tape.sigmoid(pre);
    let diff = tape.sub(r_self, r_cross);
    let mix = tape.mul(gate, diff);
    let fused = tape.add(r_cross, mix);
    (fused, gate)
}

/// Causal `[L, L]` bias: `MLP([h_i | e_b(j) | e_v(j) | fused_i])` for real `j <= i`, else 0.
pub fn hba_bias<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    behavior_rows: Var,
    item_rows: Var,
    fused: Var,
    ctx: &RowContext,
    names: &HbaNames,
) -> Var {
    let wh = tape.param(&names.bias_wh);
    let wb = tape.param(&names.bias_wb);
    let wv = tape.param(&names.bias_wv);
    let wr = tape.param(&names.bias_wr);
    let b1 = tape.param(&names.bias_b1);
    let w2 = tape.param(&names.bias_w2);
    let b2 = tape.param(&names.bias_b2);

    let qh = tape.matmul(h, wh);
    let qr = tape.matmul(fused, wr);
    let query = tape.add(qh, qr);
    let query = tape.add_row(query, b1);
    let kb = tape.matmul(behavior_rows, wb);
    let kv = tape.matmul(item_rows, wv);
    let key = tape.add(kb, kv);

    let pre = tape.pair_add(query, key);
    let hidden = tape.tanh(pre);
    let out = tape.matmul(hidden, w2);
    let out = tape.add_row(out, b2);
    let out = tape.mul_const(out, indicator(&ctx.causal()));
    tape.reshape(out, &[ctx.len, ctx.len])
}

/// Every intermediate of one layer's aggregation block.
#[derive(Clone, Copy, Debug)]
pub struct HbaOutput {
    pub r_low: Var,
    pub r_high: Var,
    pub r_self: Var,
    pub r_cross: Var,
    pub gate: Var,
    pub fused: Var,
    pub bias: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn hba_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    behavior_rows: Var,
    item_rows: Var,
    ctx: &RowContext,
    split: IntensitySplit,
    names: &HbaNames,
) -> HbaOutput {
    let masks = intensity_masks(ctx, split);
    let r_low = stratified_attention(tape, h, masks.low, names);
    let r_high = stratified_attention(tape, h, masks.high, names);
    let (r_self, r_cross) = route_self_cross(tape, r_low, r_high, ctx);
    let (fused, gate) = moe_fuse(tape, r_self, r_cross, names);
    let bias = hba_bias(tape, h, behavior_rows, item_rows, fused, ctx, names);
    HbaOutput { r_low, r_high, r_self, r_cross, gate, fused, bias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Interaction, UserSequence};

    const LOW: usize = 0;
    const HIGH: usize = 2;
    const BITS: [u8; 4] = [0, 0, 1, 1];

    fn ctx(behaviors: &[usize], len: usize) -> RowContext {
        let seq = UserSequence::new(
            0,
            "u",
            behaviors
                .iter()
                .enumerate()
                .map(|(t, &b)| Interaction { user: 0, item: t, category: 0, behavior: b, timestamp: t as u64 })
                .collect(),
        );
        let batch = Batch::from_sequences(&[&seq], len);
        RowContext::new(&batch.row(0), &BITS)
    }

    fn row(mask: &[bool], n: usize, i: usize) -> Vec<usize> {
        (0..n).filter(|&j| mask[i * n + j]).collect()
    }

    #[test]
    fn alternating_strata() {
        let c = ctx(&[LOW, HIGH, LOW, HIGH], 4);
        let m = intensity_masks(&c, IntensitySplit::Full);
        assert_eq!(row(&m.low, 4, 3), [0, 2]);
        assert_eq!(row(&m.high, 4, 3), [1, 3]);
        assert_eq!(row(&m.low, 4, 0), [0]);
        assert!(row(&m.high, 4, 0).is_empty());
    }

    #[test]
    fn all_high_leaves_low_channel_empty() {
        let c = ctx(&[HIGH, 3, HIGH], 3);
        let m = intensity_masks(&c, IntensitySplit::Full);
        assert!(m.low.iter().all(|&x| !x));
    }

    #[test]
    fn uniform_split_uses_causal_mask() {
        let c = ctx(&[LOW, HIGH, LOW], 4);
        let m = intensity_masks(&c, IntensitySplit::Uniform);
        assert_eq!(m.low, c.causal());
        assert_eq!(m.high, c.causal());
    }

    #[test]
    fn padded_queries_are_fully_masked() {
        let c = ctx(&[LOW, HIGH], 4);
        let m = intensity_masks(&c, IntensitySplit::Full);
        for i in 0..2 {
            assert!(row(&m.low, 4, i).is_empty() && row(&m.high, 4, i).is_empty());
        }
        let (low, _) = build_intensity_masks::<f32>(
            &Batch::from_sequences(
                &[&UserSequence::new(0, "u", vec![Interaction { user: 0, item: 0, category: 0, behavior: 0, timestamp: 0 }])],
                2,
            ),
            &BITS,
            IntensitySplit::Full,
        );
        assert_eq!(low.shape(), &[1, 2, 2]);
        assert_eq!(low.data()[3], 0.0);
        assert_eq!(low.data()[0], f32::NEG_INFINITY);
    }

    fn names() -> HbaNames {
        HbaNames::new(0)
    }

    fn identity_store(d: usize) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        names().register(&mut s, d, 0);
        let mut eye = Tensor::zeros(&[d, d]);
        for k in 0..d {
            eye.data_mut()[k * d + k] = 1.0;
        }
        s.insert(names().wv, eye);
        s.insert(names().wq, Tensor::zeros(&[d, d]));
        s.insert(names().wk, Tensor::zeros(&[d, d]));
        s
    }

    #[test]
    fn uniform_scores_average_allowed_values() {
        let s = identity_store(2);
        let mut t = Tape::new(&s);
        let h = t.input(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let r = stratified_attention(&mut t, h, vec![true, false, false, true, true, false, true, true, true], &names());
        let out = t.value(r).row(2).to_vec();
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
        let single = t.value(r).row(0).to_vec();
        assert_eq!(single, [1.0, 2.0]);
    }

    #[test]
    fn empty_stratum_gives_zero_vector() {
        let s = identity_store(2);
        let mut t = Tape::new(&s);
        let h = t.input(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = stratified_attention(&mut t, h, vec![false, false, true, true], &names());
        assert_eq!(t.value(r).row(0), &[0.0, 0.0]);
    }

    #[test]
    fn routing_follows_query_stratum() {
        let s = ParameterStore::<f64>::new();
        let c = ctx(&[LOW, HIGH], 2);
        let mut t = Tape::new(&s);
        let low = t.input(Tensor::from_f64(&[2, 1], &[1.0, 2.0]));
        let high = t.input(Tensor::from_f64(&[2, 1], &[10.0, 20.0]));
        let (a, b) = route_self_cross(&mut t, low, high, &c);
        assert_eq!(t.value(a).data(), &[1.0, 20.0]);
        assert_eq!(t.value(b).data(), &[10.0, 2.0]);

        let (a, b) = route_self_cross(&mut t, low, low, &c);
        assert_eq!(t.value(a).data(), &[1.0, 2.0]);
        assert_eq!(t.value(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_gate_averages_and_saturated_gate_selects() {
        let d = 2;
        let mut s = ParameterStore::<f64>::new();
        s.insert(names().gate_w, Tensor::zeros(&[2 * d, d]));
        s.insert(names().gate_b, Tensor::zeros(&[d]));
        {
            let mut t = Tape::new(&s);
            let a = t.input(Tensor::from_f64(&[1, 2], &[1.0, 4.0]));
            let b = t.input(Tensor::from_f64(&[1, 2], &[3.0, 0.0]));
            let (fused, gate) = moe_fuse(&mut t, a, b, &names());
            assert_eq!(t.value(gate).data(), &[0.5, 0.5]);
            assert_eq!(t.value(fused).data(), &[2.0, 2.0]);
            let (same, _) = moe_fuse(&mut t, a, a, &names());
            assert_eq!(t.value(same).data(), &[1.0, 4.0]);
        }
        s.insert(names().gate_b, Tensor::from_f64(&[d], &[60.0, 60.0]));
        let mut t = Tape::new(&s);
        let a = t.input(Tensor::from_f64(&[1, 2], &[1.0, 4.0]));
        let b = t.input(Tensor::from_f64(&[1, 2], &[3.0, 0.0]));
        let (fused, _) = moe_fuse(&mut t, a, b, &names());
        assert!(t.value(fused).max_abs_diff(&Tensor::from_f64(&[1, 2], &[1.0, 4.0])) < 1e-12);
    }

    fn zero_bias_store(d: usize) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        for (name, shape) in names().shapes(d) {
            s.insert(name, Tensor::zeros(&shape));
        }
        s
    }

    #[test]
    fn zero_mlp_gives_zero_bias() {
        let s = zero_bias_store(2);
        let c = ctx(&[LOW, HIGH], 2);
        let mut t = Tape::new(&s);
        let x = t.input(Tensor::from_f64(&[2, 2], &[1.0, -1.0, 0.5, 2.0]));
        let b = hba_bias(&mut t, x, x, x, x, &c, &names());
        assert!(t.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pass_through_unit_is_tanh_of_the_query_coordinate() {
        let d = 2;
        let mut s = zero_bias_store(d);
        s.insert(names().bias_wh, Tensor::from_f64(&[d, d], &[1.0, 0.0, 0.0, 0.0]));
        s.insert(names().bias_w2, Tensor::from_f64(&[d, 1], &[1.0, 0.0]));
        // large constant output bias makes the causal indicator visible
        let c = ctx(&[LOW, HIGH], 2);
        let mut t = Tape::new(&s);
        let h = t.input(Tensor::from_f64(&[2, 2], &[0.3, 5.0, -1.2, 7.0]));
        let other = t.input(Tensor::from_f64(&[2, 2], &[9.0, 9.0, 9.0, 9.0]));
        let b = hba_bias(&mut t, h, other, other, other, &c, &names());
        let v = t.value(b).data().to_vec();
        // rows: query i; columns: key j
        assert!((v[0] - 0.3f64.tanh()).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - (-1.2f64).tanh()).abs() < 1e-15);
        assert!((v[3] - (-1.2f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn bias_is_zero_above_the_diagonal_for_any_weights() {
        let d = 3;
        let mut s = ParameterStore::<f64>::new();
        names().register(&mut s, d, 5);
        s.insert(names().bias_b2, Tensor::from_f64(&[1], &[2.5]));
        let c = ctx(&[LOW, HIGH, LOW, HIGH], 5);
        let mut t = Tape::new(&s);
        let x = t.input(crate::numerics::init::normal(&[5, d], 1.0, &mut named_rng(1, "x")));
        let b = hba_bias(&mut t, x, x, x, x, &c, &names());
        let v = t.value(b);
        for i in 0..5 {
            for j in 0..5 {
                let allowed = j <= i && i >= 1 && j >= 1;
                assert_eq!(v.data()[i * 5 + j] != 0.0, allowed, "({i},{j})");
            }
        }
    }
}
