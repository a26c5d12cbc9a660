//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates parameter
//! gradients into the [`ParamStore`] the parameters were read from.

use std::collections::HashMap;

use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Row layout of a batch of equal-length sequences stacked into one matrix.
///
/// Sequence `s` occupies rows `s * seq_len .. (s + 1) * seq_len`; `valid`
/// marks the rows that may be attended to (padding is `false`).
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub valid: Vec<bool>,
}

impl SeqLayout {
    pub fn new(n_seq: usize, seq_len: usize, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), n_seq * seq_len, "layout mask has wrong length");
        Self {
            n_seq,
            seq_len,
            valid,
        }
    }

    pub fn dense(n_seq: usize, seq_len: usize) -> Self {
        Self::new(n_seq, seq_len, vec![true; n_seq * seq_len])
    }

    pub fn rows(&self) -> usize {
        self.n_seq * self.seq_len
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulConst(NodeId, Vec<T>),
    Scale(NodeId, T),
    Gelu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Clamp(NodeId, T, T),
    Square(NodeId),
    Sum(NodeId),
    WeightedSum(NodeId, Vec<T>),
    RowSum(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        rstd: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<T>,
    },
    XentRows {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
    },
    L2Normalize {
        a: NodeId,
        norms: Vec<T>,
    },
    GatherRows {
        sources: Vec<NodeId>,
        map: Vec<Option<(usize, usize)>>,
    },
    PlaceCols {
        parts: Vec<(NodeId, Vec<usize>)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// `(1 + tanh(c(x + kx³))) / 2`, written as a logistic so it costs one `exp`.
#[inline]
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_K) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Reads a parameter into the graph. Repeated reads share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        gemm_acc(
            &self.value(a).data,
            &self.value(b).data,
            &mut out.data,
            m,
            k,
            n,
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        gemm_nt_acc(
            &self.value(a).data,
            &self.value(b).data,
            &mut out.data,
            m,
            k,
            n,
        );
        self.push(out, Op::MatMulNT(a, b))
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.rows, va.cols, data)
    }

    fn map(&self, a: NodeId, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor::from_vec(va.rows, va.cols, va.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.shape(), (1, va.cols), "add_row expects a 1 x n row");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Elementwise product with a constant of the same shape (masks, noise).
    pub fn mul_const(&mut self, a: NodeId, c: Vec<T>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "mul_const length mismatch");
        let data = va.data.iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.rows, va.cols, data);
        self.push(out, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x * gelu_gate(x));
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x.exp());
        self.push(v, Op::Exp(a))
    }

    /// Hard clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.map(a, |x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `Σ a ⊙ w` for a constant weight array.
    pub fn weighted_sum(&mut self, a: NodeId, w: Vec<T>) -> NodeId {
        let s = dot(&self.value(a).data, &w);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, w))
    }

    /// Per-row sum, `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = (0..va.rows)
            .map(|r| va.row(r).iter().fold(T::zero(), |acc, &x| acc + x))
            .collect();
        let out = Tensor::from_vec(va.rows, 1, data);
        self.push(out, Op::RowSum(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape changes element count");
        let out = Tensor::from_vec(rows, cols, va.data.clone());
        self.push(out, Op::Reshape(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let vx = self.value(x);
        let (m, n) = vx.shape();
        let vg = &self.value(gain).data;
        let vb = &self.value(bias).data;
        assert_eq!(vg.len(), n);
        assert_eq!(vb.len(), n);
        let nf = T::c(n as f64);
        let mut out = Tensor::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = vx.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
            rstd.push(rs);
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * rs * vg[j] + vb[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention over stacked sequences.
    ///
    /// Keys on invalid rows are excluded; with `causal`, query `i` only sees
    /// keys `j <= i` of its own sequence.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        layout: &SeqLayout,
        causal: bool,
        heads: usize,
    ) -> NodeId {
        let (rows, d) = self.shape(q);
        assert_eq!(rows, layout.rows(), "attention layout does not match rows");
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        assert!(heads > 0 && d % heads == 0, "d_model must divide by heads");
        let dh = d / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let l = layout.seq_len;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(rows, d);
        let mut probs = vec![T::zero(); layout.n_seq * heads * l * l];
        let mut scores = vec![T::zero(); l];
        for s in 0..layout.n_seq {
            let base = s * l;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..l {
                    let qi = &vq.row(base + i)[cols.clone()];
                    let mut max = T::neg_infinity();
                    for j in 0..l {
                        if !layout.valid[base + j] || (causal && j > i) {
                            scores[j] = T::neg_infinity();
                            continue;
                        }
                        let sc = dot(qi, &vk.row(base + j)[cols.clone()]) * scale;
                        scores[j] = sc;
                        if sc > max {
                            max = sc;
                        }
                    }
                    let p = &mut probs[((s * heads + h) * l + i) * l..][..l];
                    if max == T::neg_infinity() {
                        continue;
                    }
                    let mut z = T::zero();
                    for j in 0..l {
                        let e = if scores[j] == T::neg_infinity() {
                            T::zero()
                        } else {
                            (scores[j] - max).exp()
                        };
                        p[j] = e;
                        z += e;
                    }
                    let orow = &mut out.data[(base + i) * d..(base + i + 1) * d][cols.clone()];
                    for j in 0..l {
                        p[j] /= z;
                        if p[j] == T::zero() {
                            continue;
                        }
                        let vj = &vv.row(base + j)[cols.clone()];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
        )
    }

    /// Summed softmax cross-entropy over the rows that carry a target.
    pub fn xent_rows(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        let vl = self.value(logits);
        assert_eq!(vl.rows, targets.len(), "one target slot per row");
        let mut probs = vec![T::zero(); vl.len()];
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let p = &mut probs[r * vl.cols..(r + 1) * vl.cols];
            let mut z = T::zero();
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            if let Some(t) = *t {
                assert!(t < vl.cols, "target out of range");
                loss += z.ln() - (row[t] - max);
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::XentRows {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Divides each row by its Euclidean norm. Callers must reject zero rows.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows);
        for r in 0..va.rows {
            let n = dot(va.row(r), va.row(r)).sqrt();
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        self.push(out, Op::L2Normalize { a, norms })
    }

    /// Builds a matrix row by row from rows of `sources`; `None` gives a zero row.
    pub fn gather_rows(&mut self, sources: &[NodeId], map: Vec<Option<(usize, usize)>>) -> NodeId {
        let cols = self.shape(sources[0]).1;
        for &s in sources {
            assert_eq!(self.shape(s).1, cols, "gather_rows sources differ in width");
        }
        let mut out = Tensor::zeros(map.len(), cols);
        for (r, m) in map.iter().enumerate() {
            if let Some((src, row)) = *m {
                out.row_mut(r)
                    .copy_from_slice(self.value(sources[src]).row(row));
            }
        }
        self.push(
            out,
            Op::GatherRows {
                sources: sources.to_vec(),
                map,
            },
        )
    }

    /// Scatters the columns of each part into the listed output columns.
    pub fn place_cols(&mut self, parts: Vec<(NodeId, Vec<usize>)>, total_cols: usize) -> NodeId {
        let rows = self.shape(parts[0].0).0;
        let mut out = Tensor::zeros(rows, total_cols);
        for (node, dest) in &parts {
            let v = self.value(*node);
            assert_eq!(v.shape(), (rows, dest.len()), "place_cols part shape");
            for r in 0..rows {
                let src = v.row(r);
                let dst = out.row_mut(r);
                for (c, &d) in dest.iter().enumerate() {
                    dst[d] = src[c];
                }
            }
        }
        self.push(out, Op::PlaceCols { parts })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mut offset = 0;
        let mut spec = Vec::with_capacity(parts.len());
        for &p in parts {
            let w = self.shape(p).1;
            spec.push((p, (offset..offset + w).collect()));
            offset += w;
        }
        self.place_cols(spec, offset)
    }

    /// Column subset, expressed as a row gather over the transpose.
    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let t = self.transpose(a);
        let map = cols.iter().map(|&c| Some((0, c))).collect();
        let g = self.gather_rows(&[t], map);
        self.transpose(g)
    }

    /// Runs reverse-mode accumulation from the scalar `loss` and adds the
    /// resulting parameter gradients into `store`.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) {
        let grads = self.gradients(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads[i]) {
                store.accumulate_grad(*pid, g);
            }
        }
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: NodeId) -> Vec<Option<Vec<T>>> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = out.cols;
                let ga = slot(grads, *a, m * k);
                gemm_nt_acc(g, &self.value(*b).data, ga, m, n, k);
                let gb = slot(grads, *b, k * n);
                gemm_tn_acc(&self.value(*a).data, g, gb, m, k, n);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = out.cols;
                let ga = slot(grads, *a, m * k);
                gemm_acc(g, &self.value(*b).data, ga, m, n, k);
                let gb = slot(grads, *b, n * k);
                gemm_tn_acc(g, &self.value(*a).data, gb, m, n, k);
            }
            Op::Add(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                add_into(slot(grads, *b, g.len()), g);
            }
            Op::Sub(a, b) => {
                add_into(slot(grads, *a, g.len()), g);
                let gb = slot(grads, *b, g.len());
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *d += s * y;
                }
                let gb = slot(grads, *b, g.len());
                for ((d, &s), &x) in gb.iter_mut().zip(g).zip(va) {
                    *d += s * x;
                }
            }
            Op::AddRow(a, row) => {
                add_into(slot(grads, *a, g.len()), g);
                let cols = out.cols;
                let gr = slot(grads, *row, cols);
                for r in 0..out.rows {
                    add_into(gr, &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::MulConst(a, c) => {
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(c) {
                    *d += s * y;
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.len());
                for (d, &v) in ga.iter_mut().zip(g) {
                    *d += v * *s;
                }
            }
            Op::Gelu(a) => {
                let va = &self.value(*a).data;
                let (c, k) = (T::c(GELU_C), T::c(GELU_K));
                let (two, three) = (T::c(2.0), T::c(3.0));
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                    let p = gelu_gate(x);
                    let dp = two * p * (T::one() - p) * c * (T::one() + three * k * x * x);
                    *d += s * (p + x * dp);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&out.data) {
                    *d += s * (T::one() - y * y);
                }
            }
            Op::Exp(a) => {
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &y) in ga.iter_mut().zip(g).zip(&out.data) {
                    *d += s * y;
                }
            }
            Op::Clamp(a, lo, hi) => {
                let va = &self.value(*a).data;
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                    if x >= *lo && x <= *hi {
                        *d += s;
                    }
                }
            }
            Op::Square(a) => {
                let va = &self.value(*a).data;
                let two = T::c(2.0);
                let ga = slot(grads, *a, g.len());
                for ((d, &s), &x) in ga.iter_mut().zip(g).zip(va) {
                    *d += s * two * x;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::WeightedSum(a, w) => {
                let ga = slot(grads, *a, w.len());
                for (d, &wv) in ga.iter_mut().zip(w) {
                    *d += g[0] * wv;
                }
            }
            Op::RowSum(a) => {
                let (m, n) = self.shape(*a);
                let ga = slot(grads, *a, m * n);
                for r in 0..m {
                    ga[r * n..(r + 1) * n].iter_mut().for_each(|d| *d += g[r]);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.shape(*a);
                let ga = slot(grads, *a, m * n);
                // out is n x m
                for r in 0..m {
                    for c in 0..n {
                        ga[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), g),
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstd,
            } => {
                let vx = self.value(*x);
                let (m, n) = vx.shape();
                let vg = &self.value(*gain).data;
                let nf = T::c(n as f64);
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                let mut dgain = vec![T::zero(); n];
                let mut dbias = vec![T::zero(); n];
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = vx.row(r);
                    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
                    let gr = &g[r * n..(r + 1) * n];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd[r];
                        dxhat[j] = gr[j] * vg[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    for j in 0..n {
                        dx[r * n + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                add_into(slot(grads, *x, m * n), &dx);
                add_into(slot(grads, *gain, n), &dgain);
                add_into(slot(grads, *bias, n), &dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let (rows, d) = self.shape(*q);
                let dh = d / heads;
                let scale = T::one() / T::c(dh as f64).sqrt();
                let l = layout.seq_len;
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); rows * d];
                let mut dk = vec![T::zero(); rows * d];
                let mut dv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); l];
                for s in 0..layout.n_seq {
                    let base = s * l;
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..l {
                            let p = &probs[((s * heads + h) * l + i) * l..][..l];
                            let goi = &g[(base + i) * d + c0..(base + i) * d + c0 + dh];
                            let mut acc = T::zero();
                            for j in 0..l {
                                if p[j] == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                dp[j] = dot(goi, &vv.row(base + j)[c0..c0 + dh]);
                                acc += p[j] * dp[j];
                                let dvj = &mut dv[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                for (o, &x) in dvj.iter_mut().zip(goi) {
                                    *o += p[j] * x;
                                }
                            }
                            let qi = &vq.row(base + i)[c0..c0 + dh];
                            for j in 0..l {
                                if p[j] == T::zero() {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - acc) * scale;
                                let kj = &vk.row(base + j)[c0..c0 + dh];
                                let dqi = &mut dq[(base + i) * d + c0..(base + i) * d + c0 + dh];
                                for (o, &x) in dqi.iter_mut().zip(kj) {
                                    *o += ds * x;
                                }
                                let dkj = &mut dk[(base + j) * d + c0..(base + j) * d + c0 + dh];
                                for (o, &x) in dkj.iter_mut().zip(qi) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                add_into(slot(grads, *q, rows * d), &dq);
                add_into(slot(grads, *k, rows * d), &dk);
                add_into(slot(grads, *v, rows * d), &dv);
            }
            Op::XentRows {
                logits,
                targets,
                probs,
            } => {
                let cols = self.shape(*logits).1;
                let gl = slot(grads, *logits, probs.len());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let p = &probs[r * cols..(r + 1) * cols];
                    let dst = &mut gl[r * cols..(r + 1) * cols];
                    for (d, &pj) in dst.iter_mut().zip(p) {
                        *d += g[0] * pj;
                    }
                    dst[t] -= g[0];
                }
            }
            Op::L2Normalize { a, norms } => {
                let cols = out.cols;
                let ga = slot(grads, *a, out.len());
                for (r, &n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let yg = dot(y, gr);
                    for j in 0..cols {
                        ga[r * cols + j] += (gr[j] - y[j] * yg) / n;
                    }
                }
            }
            Op::GatherRows { sources, map } => {
                let cols = out.cols;
                for (si, &src) in sources.iter().enumerate() {
                    let len = self.value(src).len();
                    let gs = slot(grads, src, len);
                    for (r, m) in map.iter().enumerate() {
                        if let Some((s, row)) = *m {
                            if s == si {
                                add_into(
                                    &mut gs[row * cols..(row + 1) * cols],
                                    &g[r * cols..(r + 1) * cols],
                                );
                            }
                        }
                    }
                }
            }
            Op::PlaceCols { parts } => {
                let total = out.cols;
                for (node, dest) in parts {
                    let w = dest.len();
                    let gp = slot(grads, *node, out.rows * w);
                    for r in 0..out.rows {
                        for (c, &d) in dest.iter().enumerate() {
                            gp[r * w + c] += g[r * total + d];
                        }
                    }
                }
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let eval = |delta: f64| {
                    let mut xp = x.clone();
                    xp.data[i] += delta;
                    let mut g = Graph::new();
                    let n = g.constant(xp);
                    let out = f(&mut g, n);
                    g.value(out).item()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn analytic_grad(x: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId) -> Vec<f64> {
        let mut g = Graph::new();
        let n = g.constant(x.clone());
        let out = f(&mut g, n);
        g.gradients(out)[n.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; x.len()])
    }

    fn check(x: Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId) {
        let a = analytic_grad(&x, f);
        let n = numeric_grad(&x, f);
        for (i, (ai, ni)) in a.iter().zip(&n).enumerate() {
            let denom = ai.abs().max(ni.abs()).max(1e-8);
            assert!(
                (ai - ni).abs() / denom < 1e-5,
                "grad mismatch at {i}: analytic {ai} numeric {ni}"
            );
        }
    }

    fn input(rows: usize, cols: usize, seed: f64) -> Tensor<f64> {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 * 1.3 + seed) * 0.71).sin())
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn elementwise_ops_backprop() {
        let w = input(3, 4, 5.0);
        check(input(3, 4, 0.0), &move |g, x| {
            let c = g.constant(w.clone());
            let a = g.mul(x, c);
            let b = g.gelu(a);
            let t = g.tanh(b);
            let e = g.exp(t);
            let s = g.square(e);
            let d = g.sub(s, x);
            let sc = g.scale(d, 0.3);
            g.sum(sc)
        });
    }

    #[test]
    fn matmul_and_transpose_backprop() {
        let w = input(4, 5, 2.0);
        check(input(3, 4, 1.0), &move |g, x| {
            let c = g.constant(w.clone());
            let m = g.matmul(x, c);
            let t = g.transpose(m);
            let nt = g.matmul_nt(t, t);
            let sq = g.square(nt);
            g.sum(sq)
        });
    }

    #[test]
    fn layer_norm_backprop_through_input_gain_and_bias() {
        check(input(3, 6, 0.2), &|g, x| {
            let gain = g.constant(input(1, 6, 3.0));
            let bias = g.constant(input(1, 6, 4.0));
            let y = g.layer_norm(x, gain, bias);
            let w = (0..18).map(|i| (i as f64 * 0.3).cos()).collect();
            g.weighted_sum(y, w)
        });
        // gain as the differentiated input
        check(input(1, 6, 3.0), &|g, gain| {
            let x = g.constant(input(3, 6, 0.2));
            let bias = g.constant(input(1, 6, 4.0));
            let y = g.layer_norm(x, gain, bias);
            let sq = g.square(y);
            g.sum(sq)
        });
    }

    #[test]
    fn attention_backprop_with_mask_and_causality() {
        for causal in [false, true] {
            let layout = SeqLayout::new(
                2,
                4,
                vec![true, true, true, false, true, true, false, false],
            );
            check(input(8, 4, 0.7), &move |g, x| {
                let wk = g.constant(input(4, 4, 1.0));
                let wv = g.constant(input(4, 4, 2.0));
                let k = g.matmul(x, wk);
                let v = g.matmul(x, wv);
                let y = g.attention(x, k, v, &layout, causal, 2);
                let w = (0..32).map(|i| (i as f64 * 0.9).sin()).collect();
                g.weighted_sum(y, w)
            });
        }
    }

    #[test]
    fn xent_normalize_gather_place_backprop() {
        check(input(3, 5, 0.1), &|g, x| {
            let n = g.l2_normalize_rows(x);
            let gathered = g.gather_rows(
                &[n, x],
                vec![Some((0, 2)), None, Some((1, 0)), Some((0, 2))],
            );
            let sel = g.select_cols(gathered, &[4, 1, 3]);
            let other = g.constant(input(4, 2, 9.0));
            let placed = g.place_cols(vec![(sel, vec![0, 2, 4]), (other, vec![1, 3])], 5);
            let sc = g.scale(placed, 3.0);
            g.xent_rows(sc, vec![Some(1), None, Some(4), Some(0)])
        });
    }

    #[test]
    fn row_sum_reshape_add_row_clamp_backprop() {
        check(input(2, 6, 0.4), &|g, x| {
            let r = g.reshape(x, 4, 3);
            let row = g.constant(input(1, 3, 1.5));
            let a = g.add_row(r, row);
            let c = g.clamp(a, -0.5, 0.9);
            let m = g.mul_const(c, (0..12).map(|i| i as f64 * 0.1).collect());
            let rs = g.row_sum(m);
            let sq = g.square(rs);
            g.sum(sq)
        });
    }

    #[test]
    fn attention_ignores_masked_keys() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(input(3, 4, 0.0));
        let short = g.attention(
            x,
            x,
            x,
            &SeqLayout::new(1, 3, vec![true, true, false]),
            false,
            2,
        );
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.constant(Tensor::from_vec(2, 4, input(3, 4, 0.0).data[..8].to_vec()));
        let full = g2.attention(x2, x2, x2, &SeqLayout::dense(1, 2), false, 2);
        assert_eq!(&g.value(short).data[..8], &g2.value(full).data[..]);
    }

    #[test]
    fn params_share_one_node_and_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let p = store.register("m.w", Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a, b);
        let s = g.mul(a, b);
        let l = g.sum(s);
        g.backward(l, &mut store);
        g.backward(l, &mut store);
        assert_eq!(store.grad(p).data, vec![4.0, 8.0]);
    }
}
