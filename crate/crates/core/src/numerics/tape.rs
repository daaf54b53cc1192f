//! Reverse-mode accumulation over a recorded list of tensor operations.
//!
//! A [`Tape`] borrows a [`ParameterStore`] for the duration of one forward
//! pass. Parameters enter the tape by name without being copied; every
//! intermediate result is owned by the tape. [`Tape::backward`] walks the
//! recorded nodes in reverse and returns the gradients of every parameter
//! that influenced the scalar output.

use std::collections::HashMap;

use super::{sigmoid, softmax_row_in_place, Gradients, ParameterStore, Real, Tensor, COSINE_ZERO_NORM};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

enum Op<T> {
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    MulConst(Var, Vec<T>),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LogEps(Var, T),
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Gather(Var, Vec<Option<usize>>),
    PairAdd(Var, Var),
    PairCosine(Var),
    PairLookup(Var, Vec<Option<(usize, usize)>>),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    CandidateLogits { h: Var, table: Var, candidates: Vec<Vec<usize>> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Sum(Var),
    Reshape(Var),
}

struct Node<'a, T> {
    value: Value<'a, T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real> {
    store: &'a ParameterStore<T>,
    nodes: Vec<Node<'a, T>>,
    params: HashMap<String, Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(store: &'a ParameterStore<T>) -> Self {
        Tape { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'a ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Parameter leaf. Repeated calls with the same name return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = self.store.value(name);
        self.nodes.push(Node { value: Value::Borrowed(value), op: Op::Param(name.to_string()), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = mm(self.value(a), self.value(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = mm_nt(self.value(a), self.value(b));
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `[n]` bias to every row of an `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!(av.cols(), bv.len(), "row bias width");
        let mut out = av.clone();
        let c = out.cols();
        for r in 0..out.rows() {
            for (x, &b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        self.push(out, Op::AddRow(a, bias), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = map(self.value(a), |x| x * factor);
        let rg = self.requires(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Multiplies every element by a one-element tensor.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.len(), 1, "scale_by expects a scalar");
        let factor = sv.data()[0];
        let out = map(self.value(a), |x| x * factor);
        let rg = self.requires(a) || self.requires(s);
        self.push(out, Op::ScaleBy(a, s), rg)
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), mask.len());
        let data = av.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(av.shape(), data);
        let rg = self.requires(a);
        self.push(out, Op::MulConst(a, mask), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let rg = self.requires(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.tanh());
        let rg = self.requires(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = map(self.value(a), |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.requires(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// `ln(x + eps)`
    pub fn log_eps(&mut self, a: Var, eps: T) -> Var {
        let out = map(self.value(a), |x| (x + eps).ln());
        let rg = self.requires(a);
        self.push(out, Op::LogEps(a, eps), rg)
    }

    /// Row-wise softmax restricted to `allowed` entries; fully masked rows are zero.
    pub fn masked_softmax(&mut self, a: Var, allowed: Vec<bool>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), allowed.len());
        let mut out = av.clone();
        let c = out.cols();
        for r in 0..out.rows() {
            softmax_row_in_place(&mut out.data_mut()[r * c..(r + 1) * c], &allowed[r * c..(r + 1) * c]);
        }
        let rg = self.requires(a);
        self.push(out, Op::MaskedSoftmax(a), rg)
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Tensor::from_vec(&[rows, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.requires(a);
        self.push(Tensor::from_vec(&[rows, end - start], data), Op::SliceCols(a, start, end), rg)
    }

    /// Row lookup into a `[V, d]` table; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, ids: Vec<Option<usize>>) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut data = vec![T::zero(); ids.len() * d];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                data[r * d..(r + 1) * d].copy_from_slice(tv.row(id));
            }
        }
        let rg = self.requires(table);
        self.push(Tensor::from_vec(&[ids.len(), d], data), Op::Gather(table, ids), rg)
    }

    /// `out[i*n + j] = p[i] + k[j]` for `p: [m,d]`, `k: [n,d]`, giving `[m*n, d]`.
    pub fn pair_add(&mut self, p: Var, k: Var) -> Var {
        let pv = self.value(p);
        let kv = self.value(k);
        let (m, n, d) = (pv.rows(), kv.rows(), pv.cols());
        assert_eq!(kv.cols(), d);
        let mut data = Vec::with_capacity(m * n * d);
        for i in 0..m {
            let pi = pv.row(i);
            for j in 0..n {
                data.extend(pi.iter().zip(kv.row(j)).map(|(&a, &b)| a + b));
            }
        }
        let rg = self.requires(p) || self.requires(k);
        self.push(Tensor::from_vec(&[m * n, d], data), Op::PairAdd(p, k), rg)
    }

    /// All-pairs cosine similarity of the rows of `[n,d]`, giving `[n,n]`.
    pub fn pair_cosine(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let norms = row_norms(xv);
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = cos_with_norms(xv.row(i), xv.row(j), norms[i], norms[j]);
            }
        }
        let rg = self.requires(x);
        self.push(Tensor::from_vec(&[n, n], data), Op::PairCosine(x), rg)
    }

    /// Entry lookup into a square matrix per output element; `None` yields 0.
    pub fn pair_lookup(&mut self, matrix: Var, index: Vec<Option<(usize, usize)>>, shape: &[usize]) -> Var {
        let mv = self.value(matrix);
        let c = mv.cols();
        let data = index.iter().map(|ix| ix.map_or(T::zero(), |(r, k)| mv.data()[r * c + k])).collect();
        let rg = self.requires(matrix);
        self.push(Tensor::from_vec(shape, data), Op::PairLookup(matrix, index), rg)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let (rows, c) = (xv.rows(), xv.cols());
        let eps = T::lit(LN_EPS);
        let n = T::lit(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..c {
                let h = (row[k] - mean) * rs;
                xhat[r * c + k] = h;
                out[r * c + k] = h * gv[k] + bv[k];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(Tensor::from_vec(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// `out[r][k] = h[r] . table[candidates[r][k]]`; every row must have the same candidate count.
    pub fn candidate_logits(&mut self, h: Var, table: Var, candidates: Vec<Vec<usize>>) -> Var {
        let hv = self.value(h);
        let tv = self.value(table);
        let rows = candidates.len();
        assert_eq!(hv.rows(), rows);
        let k = candidates.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows * k);
        for (r, cands) in candidates.iter().enumerate() {
            assert_eq!(cands.len(), k, "ragged candidate lists");
            let hr = hv.row(r);
            data.extend(cands.iter().map(|&c| dot(hr, tv.row(c))));
        }
        let rg = self.requires(h) || self.requires(table);
        self.push(Tensor::from_vec(&[rows, k], data), Op::CandidateLogits { h, table, candidates }, rg)
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]` as a one-element tensor.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Var {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let all = vec![true; c];
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
            softmax_row_in_place(&mut probs[r * c..(r + 1) * c], &all);
        }
        let rg = self.requires(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, targets, weights, probs }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let rg = self.requires(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Back-propagates from a one-element output and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.value(output).len(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), T::one()));
        let mut out = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(name) => {
                    out.0.insert(name.clone(), g);
                }
                Op::MatMul(a, b) => {
                    if self.requires(*a) {
                        let ga = mm_nt(&g, self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.requires(*b) {
                        let gb = mm_tn(self.value(*a), &g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.requires(*a) {
                        let ga = mm(&g, self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.requires(*b) {
                        let gb = mm_tn(&g, self.value(*a));
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || map(&g, |x| -x));
                }
                Op::Mul(a, b) => {
                    self.acc_if(&mut grads, *a, || zip_map(&g, self.value(*b), |x, y| x * y));
                    self.acc_if(&mut grads, *b, || zip_map(&g, self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, bias) => {
                    self.acc_if(&mut grads, *bias, || {
                        let c = g.cols();
                        let mut gb = vec![T::zero(); c];
                        for r in 0..g.rows() {
                            for (acc, &x) in gb.iter_mut().zip(g.row(r)) {
                                *acc += x;
                            }
                        }
                        Tensor::from_vec(self.value(*bias).shape(), gb)
                    });
                    self.acc_if(&mut grads, *a, || g.clone());
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    self.acc_if(&mut grads, *a, || map(&g, |x| x * f));
                }
                Op::ScaleBy(a, s) => {
                    let f = self.value(*s).data()[0];
                    self.acc_if(&mut grads, *s, || {
                        let total = g.data().iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).sum();
                        Tensor::from_vec(self.value(*s).shape(), vec![total])
                    });
                    self.acc_if(&mut grads, *a, || map(&g, |x| x * f));
                }
                Op::MulConst(a, mask) => {
                    self.acc_if(&mut grads, *a, || {
                        let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                        Tensor::from_vec(g.shape(), data)
                    });
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    self.acc_if(&mut grads, *a, || zip_map(&g, y, |gi, yi| gi * yi * (T::one() - yi)));
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(idx));
                    self.acc_if(&mut grads, *a, || zip_map(&g, y, |gi, yi| gi * (T::one() - yi * yi)));
                }
                Op::Gelu(a) => {
                    let c = T::lit(GELU_C);
                    let k = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    self.acc_if(&mut grads, *a, || {
                        zip_map(&g, self.value(*a), |gi, x| {
                            let t = (c * (x + k * x * x * x)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                            gi * (half * (T::one() + t) + half * x * dt)
                        })
                    });
                }
                Op::LogEps(a, eps) => {
                    let eps = *eps;
                    self.acc_if(&mut grads, *a, || zip_map(&g, self.value(*a), |gi, x| gi / (x + eps)));
                }
                Op::MaskedSoftmax(a) => {
                    let y = self.value(Var(idx));
                    self.acc_if(&mut grads, *a, || {
                        let c = y.cols();
                        let mut ga = vec![T::zero(); y.len()];
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let inner: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                            for k in 0..c {
                                ga[r * c + k] = yr[k] * (gr[k] - inner);
                            }
                        }
                        Tensor::from_vec(y.shape(), ga)
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let w = pv.cols();
                        if self.requires(p) {
                            let mut gp = Vec::with_capacity(pv.len());
                            for r in 0..g.rows() {
                                gp.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            self.acc(&mut grads, p, Tensor::from_vec(pv.shape(), gp));
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let (start, end) = (*start, *end);
                    self.acc_if(&mut grads, *a, || {
                        let av = self.value(*a);
                        let mut ga = Tensor::zeros(av.shape());
                        for r in 0..g.rows() {
                            ga.row_mut(r)[start..end].copy_from_slice(g.row(r));
                        }
                        ga
                    });
                }
                Op::Gather(table, ids) => {
                    self.acc_if(&mut grads, *table, || {
                        let mut gt = Tensor::zeros(self.value(*table).shape());
                        for (r, id) in ids.iter().enumerate() {
                            if let Some(id) = *id {
                                for (acc, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                                    *acc += x;
                                }
                            }
                        }
                        gt
                    });
                }
                Op::PairAdd(p, k) => {
                    let m = self.value(*p).rows();
                    let n = self.value(*k).rows();
                    let d = g.cols();
                    self.acc_if(&mut grads, *p, || {
                        let mut gp = Tensor::zeros(self.value(*p).shape());
                        for i in 0..m {
                            let acc = gp.row_mut(i);
                            for j in 0..n {
                                for (a, &x) in acc.iter_mut().zip(&g.data()[(i * n + j) * d..(i * n + j + 1) * d]) {
                                    *a += x;
                                }
                            }
                        }
                        gp
                    });
                    self.acc_if(&mut grads, *k, || {
                        let mut gk = Tensor::zeros(self.value(*k).shape());
                        for i in 0..m {
                            for j in 0..n {
                                for (a, &x) in gk.row_mut(j).iter_mut().zip(&g.data()[(i * n + j) * d..(i * n + j + 1) * d]) {
                                    *a += x;
                                }
                            }
                        }
                        gk
                    });
                }
                Op::PairCosine(x) => {
                    let xv = self.value(*x);
                    let y = self.value(Var(idx));
                    self.acc_if(&mut grads, *x, || {
                        let n = xv.rows();
                        let norms = row_norms(xv);
                        let thr = T::lit(COSINE_ZERO_NORM);
                        let mut gx = Tensor::zeros(xv.shape());
                        for i in 0..n {
                            for j in 0..n {
                                let gij = g.data()[i * n + j];
                                if gij == T::zero() || norms[i] < thr || norms[j] < thr {
                                    continue;
                                }
                                let c = y.data()[i * n + j];
                                let inv = T::one() / (norms[i] * norms[j]);
                                let (xi, xj) = (xv.row(i).to_vec(), xv.row(j).to_vec());
                                let ni2 = norms[i] * norms[i];
                                let nj2 = norms[j] * norms[j];
                                for (k, a) in gx.row_mut(i).iter_mut().enumerate() {
                                    *a += gij * (xj[k] * inv - c * xi[k] / ni2);
                                }
                                for (k, a) in gx.row_mut(j).iter_mut().enumerate() {
                                    *a += gij * (xi[k] * inv - c * xj[k] / nj2);
                                }
                            }
                        }
                        gx
                    });
                }
                Op::PairLookup(matrix, index) => {
                    self.acc_if(&mut grads, *matrix, || {
                        let mut gm = Tensor::zeros(self.value(*matrix).shape());
                        let c = gm.cols();
                        for (e, ix) in index.iter().enumerate() {
                            if let Some((r, k)) = *ix {
                                gm.data_mut()[r * c + k] += g.data()[e];
                            }
                        }
                        gm
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let c = g.cols();
                    let rows = g.rows();
                    let gv = self.value(*gamma).data();
                    self.acc_if(&mut grads, *gamma, || {
                        let mut gg = vec![T::zero(); c];
                        for r in 0..rows {
                            for k in 0..c {
                                gg[k] += g.data()[r * c + k] * xhat[r * c + k];
                            }
                        }
                        Tensor::from_vec(self.value(*gamma).shape(), gg)
                    });
                    self.acc_if(&mut grads, *beta, || {
                        let mut gb = vec![T::zero(); c];
                        for r in 0..rows {
                            for (acc, &x) in gb.iter_mut().zip(g.row(r)) {
                                *acc += x;
                            }
                        }
                        Tensor::from_vec(self.value(*beta).shape(), gb)
                    });
                    self.acc_if(&mut grads, *x, || {
                        let n = T::lit(c as f64);
                        let mut gx = vec![T::zero(); rows * c];
                        for r in 0..rows {
                            let dxhat: Vec<T> = (0..c).map(|k| g.data()[r * c + k] * gv[k]).collect();
                            let mean_d = dxhat.iter().copied().sum::<T>() / n;
                            let mean_dx = dxhat.iter().zip(&xhat[r * c..(r + 1) * c]).map(|(&a, &b)| a * b).sum::<T>() / n;
                            for k in 0..c {
                                gx[r * c + k] = rstd[r] * (dxhat[k] - mean_d - xhat[r * c + k] * mean_dx);
                            }
                        }
                        Tensor::from_vec(g.shape(), gx)
                    });
                }
                Op::CandidateLogits { h, table, candidates } => {
                    let hv = self.value(*h);
                    let tv = self.value(*table);
                    let k = g.cols();
                    self.acc_if(&mut grads, *h, || {
                        let mut gh = Tensor::zeros(hv.shape());
                        for (r, cands) in candidates.iter().enumerate() {
                            let acc = gh.row_mut(r);
                            for (q, &c) in cands.iter().enumerate() {
                                let w = g.data()[r * k + q];
                                for (a, &t) in acc.iter_mut().zip(tv.row(c)) {
                                    *a += w * t;
                                }
                            }
                        }
                        gh
                    });
                    self.acc_if(&mut grads, *table, || {
                        let mut gt = Tensor::zeros(tv.shape());
                        for (r, cands) in candidates.iter().enumerate() {
                            let hr = hv.row(r);
                            for (q, &c) in cands.iter().enumerate() {
                                let w = g.data()[r * k + q];
                                for (a, &x) in gt.row_mut(c).iter_mut().zip(hr) {
                                    *a += w * x;
                                }
                            }
                        }
                        gt
                    });
                }
                Op::SoftmaxXent { logits, targets, weights, probs } => {
                    let scale = g.data()[0];
                    self.acc_if(&mut grads, *logits, || {
                        let lv = self.value(*logits);
                        let c = lv.cols();
                        let mut gl = probs.clone();
                        for r in 0..lv.rows() {
                            gl[r * c + targets[r]] -= T::one();
                            for x in &mut gl[r * c..(r + 1) * c] {
                                *x *= weights[r] * scale;
                            }
                        }
                        Tensor::from_vec(lv.shape(), gl)
                    });
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    self.acc_if(&mut grads, *a, || Tensor::filled(self.value(*a).shape(), s));
                }
                Op::Reshape(a) => {
                    self.acc_if(&mut grads, *a, || g.clone().reshaped(self.value(*a).shape()));
                }
            }
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.requires(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }
}

fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_vec(a.shape(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.len(), b.len(), "elementwise shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// Eight interleaved partial sums so the loop vectorizes; the summation
/// order is fixed, so results stay reproducible.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn row_norms<T: Real>(x: &Tensor<T>) -> Vec<T> {
    (0..x.rows()).map(|r| dot(x.row(r), x.row(r)).sqrt()).collect()
}

fn cos_with_norms<T: Real>(a: &[T], b: &[T], na: T, nb: T) -> T {
    let thr = T::lit(COSINE_ZERO_NORM);
    if na < thr || nb < thr {
        return T::zero();
    }
    (dot(a, b) / (na * nb)).max(-T::one()).min(T::one())
}

/// `[m,k] x [k,n]`
pub(crate) fn mm<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); m * n];
    let bd = b.data();
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a.row(i).iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            for (o, &bpj) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `[m,k] x [n,k]^T`
pub(crate) fn mm_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.rows();
    assert_eq!(b.cols(), k, "matmul_nt inner dims {:?} x {:?}", a.shape(), b.shape());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// `[k,m]^T x [k,n]`
fn mm_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (k, m) = (a.rows(), a.cols());
    let n = b.cols();
    assert_eq!(b.rows(), k);
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = b.row(p);
        for (i, &api) in a.row(p).iter().enumerate() {
            if api == T::zero() {
                continue;
            }
            for (o, &bpj) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += api * bpj;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}
