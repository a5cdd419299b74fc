//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape built fresh for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse scan.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, Tensor};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One weighted row copy `out[out_row] += weight * src[src_row]`.
#[derive(Debug, Clone, Copy)]
pub struct SparseEntry<T> {
    pub out_row: u32,
    pub src_row: u32,
    pub weight: T,
}

/// A run of rows attending among themselves: queries are rows
/// `start..start+len`, keys/values are rows `start..start+valid`.
/// Rows past `valid` are padding and never act as keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGroup {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    Sparse { src: Var, entries: Vec<SparseEntry<T>> },
    GroupSoftmax { a: Var, groups: Vec<(usize, usize)> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, groups: Vec<AttnGroup>, heads: usize, scale: T, probs: Vec<Vec<T>> },
    RowNormalize { a: Var, norms: Vec<T> },
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Tensor<T> },
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar loss with respect to the parameters that took part in the pass.
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> T {
        self.grads.values().map(Tensor::sq_norm).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// The tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter; repeated calls within one graph share the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `a @ b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a @ b^T`; with `b` a `[out, in]` weight this is a linear map of the rows of `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "add_row expects a row vector");
        assert_eq!(ta.cols(), tr.cols(), "add_row width mismatch");
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// Multiplies every row of `a` elementwise by the `1 x n` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows(), 1, "mul_row expects a row vector");
        assert_eq!(ta.cols(), tr.cols(), "mul_row width mismatch");
        let mut value = ta.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(tr.data()) {
                *x *= b;
            }
        }
        self.push(value, Op::MulRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| gelu(x).0);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut value = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { a, start }, &[a])
    }

    /// Sparse row mixing: an `out_rows x cols` result built from weighted copies of
    /// rows of `src`. Covers gathers, zero-padded shifts, scatter-sums and mean pooling.
    pub fn sparse(&mut self, src: Var, out_rows: usize, entries: Vec<SparseEntry<T>>) -> Var {
        let t = self.value(src);
        let mut value = Tensor::zeros(out_rows, t.cols());
        for e in &entries {
            let s = t.row(e.src_row as usize);
            let o = &mut value.data_mut()
                [e.out_row as usize * t.cols()..(e.out_row as usize + 1) * t.cols()];
            for (x, &y) in o.iter_mut().zip(s) {
                *x += e.weight * y;
            }
        }
        self.push(value, Op::Sparse { src, entries }, &[src])
    }

    /// Row gather: output row `i` is `src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Var {
        let entries = idx
            .iter()
            .enumerate()
            .map(|(o, &s)| SparseEntry {
                out_row: o as u32,
                src_row: s as u32,
                weight: T::one(),
            })
            .collect();
        self.sparse(src, idx.len(), entries)
    }

    /// Softmax down each column within each contiguous row group `(start, len)`.
    pub fn group_softmax(&mut self, a: Var, groups: Vec<(usize, usize)>) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut value = Tensor::zeros(t.rows(), cols);
        for &(start, len) in &groups {
            for c in 0..cols {
                let mut mx = T::neg_infinity();
                for r in start..start + len {
                    mx = mx.max(t.get(r, c));
                }
                let mut z = T::zero();
                for r in start..start + len {
                    let e = (t.get(r, c) - mx).exp();
                    value.set(r, c, e);
                    z += e;
                }
                for r in start..start + len {
                    let e = value.get(r, c);
                    value.set(r, c, e / z);
                }
            }
        }
        self.push(value, Op::GroupSoftmax { a, groups }, &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let t = self.value(x);
        let (rows, cols) = t.shape();
        let n = T::of(cols as f64);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            value,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention over row groups. Head `h` uses
    /// columns `h*dh..(h+1)*dh` of `q`, `k`, `v`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<AttnGroup>,
        heads: usize,
        scale: T,
    ) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.shape();
        assert_eq!(tk.shape(), (rows, d), "attention key shape");
        assert_eq!(tv.shape(), (rows, d), "attention value shape");
        assert_eq!(d % heads, 0, "attention width not divisible by heads");
        let dh = d / heads;
        let mut value = Tensor::zeros(rows, d);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in &groups {
            assert!(g.valid >= 1 && g.valid <= g.len, "attention group needs a key");
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![T::zero(); g.len * g.valid];
                for i in 0..g.len {
                    let qi = &tq.row(g.start + i)[c0..c0 + dh];
                    let pr = &mut p[i * g.valid..(i + 1) * g.valid];
                    let mut mx = T::neg_infinity();
                    for (j, s) in pr.iter_mut().enumerate() {
                        *s = dot(qi, &tk.row(g.start + j)[c0..c0 + dh]) * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = T::zero();
                    for s in pr.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    for s in pr.iter_mut() {
                        *s /= z;
                    }
                    let out = &mut value.row_mut(g.start + i)[c0..c0 + dh];
                    for (j, &pj) in pr.iter().enumerate() {
                        let vj = &tv.row(g.start + j)[c0..c0 + dh];
                        for (o, &x) in out.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            value,
            Op::Attention { q, k, v, groups, heads, scale, probs },
            &[q, k, v],
        )
    }

    /// Scales each row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut value = t.clone();
        let mut norms = Vec::with_capacity(t.rows());
        for r in 0..t.rows() {
            let n = dot(t.row(r), t.row(r)).sqrt().max(T::of(1e-12));
            for x in value.row_mut(r) {
                *x /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::RowNormalize { a, norms }, &[a])
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]` as a `1 x 1` value.
    ///
    /// Entries set to negative infinity are excluded from the normalizer.
    pub fn softmax_xent(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Var {
        let t = self.value(logits);
        assert_eq!(targets.len(), t.rows(), "one target per row");
        assert_eq!(weights.len(), t.rows(), "one weight per row");
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        let mut loss = T::zero();
        for r in 0..t.rows() {
            let row = t.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = if x == T::neg_infinity() { T::zero() } else { (x - mx).exp() };
                z += *p;
            }
            for p in probs.row_mut(r) {
                *p /= z;
            }
            let lse = mx + z.ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent { logits, targets, weights, probs },
            &[logits],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Inverted dropout with keep-probability `1 - p`; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.constant(Tensor::from_vec(r, c, mask));
        self.mul(a, m)
    }

    /// Reverse sweep from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> ParamGrads<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if node.param.is_some() {
                grads[idx] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
        }

        let grads_map = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        ParamGrads { grads: grads_map }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor<T>>],
        v: Var,
        f: impl FnOnce(&mut Tensor<T>),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if *trans_b {
                    // y = a b^T
                    self.accumulate(grads, *a, dy.matmul(tb));
                    self.accumulate(grads, *b, dy.t_matmul(ta));
                } else {
                    self.accumulate(grads, *a, dy.matmul_t(tb));
                    self.accumulate(grads, *b, ta.t_matmul(dy));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, dy.zip_map(tb, |g, x| g * x));
                self.accumulate(grads, *b, dy.zip_map(ta, |g, x| g * x));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate_with(grads, *row, |acc| {
                    for r in 0..dy.rows() {
                        for (o, &g) in acc.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let mut da = dy.clone();
                for r in 0..da.rows() {
                    for (o, &s) in da.row_mut(r).iter_mut().zip(tr.data()) {
                        *o *= s;
                    }
                }
                self.accumulate(grads, *a, da);
                self.accumulate_with(grads, *row, |acc| {
                    for r in 0..dy.rows() {
                        for ((o, &g), &x) in acc.data_mut().iter_mut().zip(dy.row(r)).zip(ta.row(r)) {
                            *o += g * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, dy.map(|g| g * s));
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, dy.zip_map(y, |g, t| g * (T::one() - t * t)));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, dy.zip_map(y, |g, s| g * s * (T::one() - s)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, dy.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() }));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let s = *slope;
                self.accumulate(grads, *a, dy.zip_map(x, |g, x| if x > T::zero() { g } else { g * s }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, dy.zip_map(x, |g, x| g * gelu(x).1));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Tensor::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            gp.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let start = *start;
                self.accumulate_with(grads, *a, |acc| {
                    for r in 0..dy.rows() {
                        let w = dy.cols();
                        for (o, &g) in acc.row_mut(r)[start..start + w].iter_mut().zip(dy.row(r)) {
                            *o += g;
                        }
                    }
                });
            }
            Op::Sparse { src, entries } => {
                self.accumulate_with(grads, *src, |acc| {
                    let cols = acc.cols();
                    for e in entries {
                        let g = dy.row(e.out_row as usize);
                        let o = &mut acc.data_mut()
                            [e.src_row as usize * cols..(e.src_row as usize + 1) * cols];
                        for (x, &gv) in o.iter_mut().zip(g) {
                            *x += e.weight * gv;
                        }
                    }
                });
            }
            Op::GroupSoftmax { a, groups } => {
                let mut da = Tensor::zeros(dy.rows(), dy.cols());
                for &(start, len) in groups {
                    for c in 0..dy.cols() {
                        let mut s = T::zero();
                        for r in start..start + len {
                            s += dy.get(r, c) * y.get(r, c);
                        }
                        for r in start..start + len {
                            da.set(r, c, y.get(r, c) * (dy.get(r, c) - s));
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let g = self.value(*gamma);
                let (rows, cols) = dy.shape();
                let n = T::of(cols as f64);
                self.accumulate_with(grads, *gamma, |acc| {
                    for r in 0..rows {
                        for ((o, &d), &xh) in acc.data_mut().iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                            *o += d * xh;
                        }
                    }
                });
                self.accumulate_with(grads, *beta, |acc| {
                    for r in 0..rows {
                        for (o, &d) in acc.data_mut().iter_mut().zip(dy.row(r)) {
                            *o += d;
                        }
                    }
                });
                if self.nodes[x.0].needs_grad {
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<T> = dy.row(r).iter().zip(g.data()).map(|(&d, &gv)| d * gv).collect();
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(xhat.row(r)).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &dh), &xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o = rstd[r] * (dh - m1 - xh * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, groups, heads, scale, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, d) = tq.shape();
                let dh = d / heads;
                let mut dq = Tensor::zeros(rows, d);
                let mut dk = Tensor::zeros(rows, d);
                let mut dv = Tensor::zeros(rows, d);
                let mut pi = 0;
                for g in groups {
                    for h in 0..*heads {
                        let c0 = h * dh;
                        let p = &probs[pi];
                        pi += 1;
                        let mut ds = vec![T::zero(); g.valid];
                        for i in 0..g.len {
                            let dyi = &dy.row(g.start + i)[c0..c0 + dh];
                            let pr = &p[i * g.valid..(i + 1) * g.valid];
                            let mut acc = T::zero();
                            for j in 0..g.valid {
                                let vj = &tv.row(g.start + j)[c0..c0 + dh];
                                let dp = dot(dyi, vj);
                                ds[j] = dp;
                                acc += dp * pr[j];
                                let dvj = &mut dv.row_mut(g.start + j)[c0..c0 + dh];
                                for (o, &gv) in dvj.iter_mut().zip(dyi) {
                                    *o += pr[j] * gv;
                                }
                            }
                            for j in 0..g.valid {
                                ds[j] = pr[j] * (ds[j] - acc) * *scale;
                            }
                            let qi: Vec<T> = tq.row(g.start + i)[c0..c0 + dh].to_vec();
                            for j in 0..g.valid {
                                let s = ds[j];
                                if s == T::zero() {
                                    continue;
                                }
                                let kj = &tk.row(g.start + j)[c0..c0 + dh];
                                let dqi = &mut dq.row_mut(g.start + i)[c0..c0 + dh];
                                for (o, &x) in dqi.iter_mut().zip(kj) {
                                    *o += s * x;
                                }
                                let dkj = &mut dk.row_mut(g.start + j)[c0..c0 + dh];
                                for (o, &x) in dkj.iter_mut().zip(&qi) {
                                    *o += s * x;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::RowNormalize { a, norms } => {
                let mut da = Tensor::zeros(dy.rows(), dy.cols());
                for r in 0..dy.rows() {
                    let yr = y.row(r);
                    let proj = dot(yr, dy.row(r));
                    for ((o, &g), &yv) in da.row_mut(r).iter_mut().zip(dy.row(r)).zip(yr) {
                        *o = (g - yv * proj) / norms[r];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxXent { logits, targets, weights, probs } => {
                let up = dy.item();
                let mut dl = probs.clone();
                for r in 0..dl.rows() {
                    let w = weights[r] * up;
                    let row = dl.row_mut(r);
                    row[targets[r]] -= T::one();
                    for x in row.iter_mut() {
                        *x *= w;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, dy.item()));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// GELU (tanh form) and its derivative.
#[inline]
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}
