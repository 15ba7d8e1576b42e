//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the record in reverse exactly
//! once, accumulating gradients into each input, so a value used twice
//! receives the sum of both path gradients.
//!
//! Parameters enter a graph through [`Graph::param`]; TUNED parameters are
//! tracked for gradients, FROZEN ones are treated as constants and their
//! weight gradients are never formed.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Grads, ParamId, ParameterStore, Tag};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Storage precision of forward values.
///
/// `F32` rounds every op output to single precision, emulating 32-bit
/// storage; gradient acceptance is defined in `F64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RowGather(Var, Rc<Vec<usize>>),
    Gather(Var, Rc<Vec<Option<usize>>>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Tanh(Var),
    Attention(Box<AttentionRecord>),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, divisor: f64, probs: Vec<f64> },
    L1(Var, Var),
    CosineRows { a: Var, b: Var, na: Vec<f64>, nb: Vec<f64> },
    BilinearSample { fmap: Var, locs: Var },
    WeightedRowSum(Var, Var),
    SegmentSum { w: Var, v: Var, seg: Rc<Vec<usize>> },
    SumAll(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: usize,
    scale: f64,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A computation record.
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    params: HashMap<ParamId, Var>,
    track_frozen: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<Tensor> {
        self.slots[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every tracked parameter reached by the pass. Tracked
    /// parameters the loss does not depend on get explicit zeros.
    pub fn param_grads(&self) -> Grads {
        let mut out = Grads::new();
        for &(id, node) in &self.params {
            let g = match &self.slots[node] {
                Some(g) => g.clone(),
                None => vec![0.0; self.shapes[node].iter().product()],
            };
            out.insert(id, Tensor::new(self.shapes[node].clone(), g).expect("grad shape"));
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Precision::F64)
    }
}

const NEG_INF: f64 = f64::NEG_INFINITY;

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            params: HashMap::new(),
            track_frozen: false,
        }
    }

    /// Graph that also differentiates FROZEN parameters (used by the text-only
    /// warm-up and diagnostics; the optimizer still only touches TUNED ones).
    pub fn tracking_all(precision: Precision) -> Self {
        Graph {
            track_frozen: true,
            ..Graph::new(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf holding a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that is differentiated (gradient readable via [`Gradients::of`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts a parameter once per graph; later calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let tracked = self.track_frozen || store.tag(id) == Tag::Tuned;
        let v = self.push(store.value(id).clone(), Op::Leaf, tracked);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            (n, 1),
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `a[n, d] + row[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).cols();
        if self.value(row).numel() != d {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(d) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `a[n, d] * row[d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).cols();
        if self.value(row).numel() != d {
            return Err(Error::shape("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut t = self.value(a).clone();
        for chunk in t.data_mut().chunks_mut(d) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x *= y;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(t, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.scale_assign(c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    // ---- structure -----------------------------------------------------------

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of nothing".into()))?;
        let d = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != d {
                return Err(Error::shape("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_cols of nothing".into()))?;
        let n = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != n {
                return Err(Error::shape("concat_cols", self.shape(first), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..n {
                data[i * total + off..i * total + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start + len > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, len]));
        }
        let d = t.cols();
        let data = t.data()[start * d..(start + len) * d].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![len, d], data)?, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || start + len > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, len]));
        }
        let (n, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&t.data()[i * d + start..i * d + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, len], data)?, Op::SliceCols(a, start), ng))
    }

    /// Selects rows of a 2-D tensor (embedding lookup when `a` is a table).
    pub fn row_gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Range(format!("row {bad} of table with {n} rows")));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::RowGather(a, Rc::new(rows.to_vec())),
            ng,
        ))
    }

    /// Flat gather: `out[i] = a[idx[i]]`, or 0 where `idx[i]` is `None`.
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<Option<usize>>>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(Error::shape("gather", shape, &[idx.len()]));
        }
        let src = self.value(a).data();
        if let Some(bad) = idx.iter().flatten().find(|&&j| j >= src.len()) {
            return Err(Error::Range(format!("gather index {bad} of {}", src.len())));
        }
        let data = idx.iter().map(|j| j.map_or(0.0, |j| src[j])).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Gather(a, idx), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    // ---- nonlinearities ------------------------------------------------------

    /// Softmax over the last axis. Rows that are entirely `-inf` produce zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let d = t.cols();
        for row in t.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let d = t.cols();
        let n = t.numel() / d.max(1);
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(n);
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|x| (x - mean) * r));
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone()).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, xhat, rstd }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for x in t.data_mut() {
            *x = gelu(*x);
        }
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        for x in t.data_mut() {
            *x = x.tanh();
        }
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    // ---- attention -------------------------------------------------------------

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[groups·n, heads·dh]`, `k` is `[groups·m, heads·dh]` and `v` is
    /// `[groups·m, heads·dv]`; each group of `n` query rows attends only to its
    /// own `m` key rows. `mask` is an optional additive matrix, either `[n, m]`
    /// shared by every group or `[groups·n, m]` with one block per group; it
    /// applies to every head. Fully masked rows produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(Error::shape("attention", &qs, &ks));
        }
        if heads == 0 || groups == 0 || qs[1] != ks[1] || qs[1] % heads != 0 || vs[1] % heads != 0 {
            return Err(Error::shape("attention", &qs, &ks));
        }
        if ks[0] != vs[0] || qs[0] % groups != 0 || ks[0] % groups != 0 {
            return Err(Error::shape("attention", &ks, &vs));
        }
        let (n, m) = (qs[0] / groups, ks[0] / groups);
        if let Some(mk) = mask {
            if mk.numel() != n * m && mk.numel() != groups * n * m {
                return Err(Error::shape("attention mask", mk.shape(), &[n, m]));
            }
        }
        let (qc, kc, vc) = (qs[1], ks[1], vs[1]);
        let (dh, dv) = (qc / heads, vc / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * heads * n * m];
        let mut out = vec![0.0; groups * n * vc];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for g in 0..groups {
                for h in 0..heads {
                    let p = &mut probs[(g * heads + h) * n * m..(g * heads + h + 1) * n * m];
                    if n == 0 || m == 0 {
                        continue;
                    }
                    gemm(
                        n,
                        dh,
                        m,
                        &qd[g * n * qc + h * dh..],
                        (qc, 1),
                        &kd[g * m * kc + h * dh..],
                        (1, kc),
                        p,
                        (m, 1),
                        false,
                    );
                    for (i, row) in p.chunks_mut(m).enumerate() {
                        for (j, s) in row.iter_mut().enumerate() {
                            *s *= scale;
                            if let Some(mk) = mask {
                                let base = if mk.numel() == n * m { 0 } else { g * n * m };
                                *s += mk.data()[base + i * m + j];
                            }
                        }
                        softmax_in_place(row);
                    }
                    gemm(
                        n,
                        m,
                        dv,
                        p,
                        (m, 1),
                        &vd[g * m * vc + h * dv..],
                        (vc, 1),
                        &mut out[g * n * vc + h * dv..],
                        (vc, 1),
                        false,
                    );
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let rec = AttentionRecord {
            q,
            k,
            v,
            heads,
            groups,
            scale,
            probs,
        };
        Ok(self.push(
            Tensor::new(vec![groups * n, vc], out)?,
            Op::Attention(Box::new(rec)),
            ng,
        ))
    }

    /// Probabilities of the most recent attention node `v` (testing aid).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(r) => Some(&r.probs),
            _ => None,
        }
    }

    // ---- losses --------------------------------------------------------------

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i]) / divisor`.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        divisor: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = (t.rows(), t.cols());
        if targets.len() != n || weights.len() != n || t.shape().len() != 2 {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Range(format!("target class {bad} with {c} classes")));
        }
        if divisor <= 0.0 {
            return Err(Error::Invalid("cross_entropy divisor must be positive".into()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(NEG_INF, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - row[targets[i]]);
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / divisor),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                divisor,
                probs,
            },
            ng,
        ))
    }

    /// Mean negative log-likelihood over rows with a nonzero mask.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let weights: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let count = weights.iter().sum::<f64>();
        if count == 0.0 {
            return Err(Error::Invalid("cross_entropy with empty mask".into()));
        }
        self.cross_entropy_weighted(logits, targets, &weights, count)
    }

    /// `Σ |a − b|` as a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("l1", self.shape(a), self.shape(b)));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), ng))
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("cosine_rows", self.shape(a), self.shape(b)));
        }
        let d = self.value(a).cols();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut na = Vec::new();
        let mut nb = Vec::new();
        let mut out = Vec::new();
        for (ra, rb) in ad.chunks(d).zip(bd.chunks(d)) {
            let x = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if x == 0.0 || y == 0.0 {
                return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
            }
            let dot: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
            na.push(x);
            nb.push(y);
            out.push(dot / (x * y));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::vector(out), Op::CosineRows { a, b, na, nb }, ng))
    }

    // ---- sampling --------------------------------------------------------------

    /// Bilinear interpolation of a `[C, H, W]` map at `N` continuous
    /// locations given as `[N, 2]` rows of `(u, v)` = (column, row) in texel
    /// units (texel `(i, j)` sits at `u = j`, `v = i`). Returns `[N, C]`.
    ///
    /// Texels outside the map contribute zero. On texel-grid lines the
    /// location derivative is the right limit.
    pub fn bilinear_sample(&mut self, fmap: Var, locs: Var) -> Result<Var> {
        let fs = self.shape(fmap).to_vec();
        let ls = self.shape(locs).to_vec();
        if fs.len() != 3 || ls.len() != 2 || ls[1] != 2 {
            return Err(Error::shape("bilinear_sample", &fs, &ls));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = ls[0];
        let f = self.value(fmap).data();
        let l = self.value(locs).data();
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let corners = bilinear_corners(l[2 * s], l[2 * s + 1], h, w);
            for (idx, wt) in corners.iter().flatten() {
                for ch in 0..c {
                    out[s * c + ch] += wt * f[ch * h * w + idx];
                }
            }
        }
        let ng = self.ng(fmap) || self.ng(locs);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::BilinearSample { fmap, locs }, ng))
    }

    /// `out[q] = Σ_s w[q, s] · v[q·S + s]` for `w: [Q, S]`, `v: [Q·S, D]`.
    pub fn weighted_row_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let (ws, vs) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        if ws.len() != 2 || vs.len() != 2 || ws[0] * ws[1] != vs[0] {
            return Err(Error::shape("weighted_row_sum", &ws, &vs));
        }
        let (q, s, d) = (ws[0], ws[1], vs[1]);
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; q * d];
        for i in 0..q {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..s {
                let wt = wd[i * s + j];
                if wt == 0.0 {
                    continue;
                }
                let row = &vd[(i * s + j) * d..(i * s + j + 1) * d];
                for (x, y) in o.iter_mut().zip(row) {
                    *x += wt * y;
                }
            }
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(Tensor::new(vec![q, d], out)?, Op::WeightedRowSum(w, v), ng))
    }

    /// `out[seg[i]] += w[i] · v[i]` for `w: [N]`, `v: [N, D]`, giving
    /// `[rows, D]`.
    pub fn segment_sum(&mut self, w: Var, v: Var, seg: Rc<Vec<usize>>, rows: usize) -> Result<Var> {
        let (ws, vs) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        let n = seg.len();
        if vs.len() != 2 || self.value(w).numel() != n || vs[0] != n {
            return Err(Error::shape("segment_sum", &ws, &vs));
        }
        if let Some(bad) = seg.iter().find(|&&r| r >= rows) {
            return Err(Error::Range(format!("segment {bad} >= {rows}")));
        }
        let d = vs[1];
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; rows * d];
        for (i, &r) in seg.iter().enumerate() {
            axpy(&mut out[r * d..(r + 1) * d], &vd[i * d..(i + 1) * d], wd[i]);
        }
        let ng = self.ng(w) || self.ng(v);
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::SegmentSum { w, v, seg }, ng))
    }

    // ---- reductions ------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Mean over rows of `[n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, d) = (t.rows(), t.cols());
        let mut out = vec![0.0; d];
        for row in t.data().chunks(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(a);
        self.push(Tensor::vector(out), Op::MeanRows(a), ng)
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; n];
        slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = slots[i].take() else { continue };
            self.propagate(i, &dy, &mut slots);
            slots[i] = Some(dy);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].needs_grad)
            .map(|(id, v)| (*id, v.0))
            .collect();
        Ok(Gradients {
            slots,
            shapes: self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn propagate(&self, i: usize, dy: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let ga = slot(slots, *a, m * k);
                    gemm(m, n, k, dy, (n, 1), self.value(*b).data(), (1, n), ga, (k, 1), true);
                }
                if self.ng(*b) {
                    let gb = slot(slots, *b, k * n);
                    gemm(k, m, n, self.value(*a).data(), (1, k), dy, (n, 1), gb, (n, 1), true);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.ng(x) {
                        axpy(slot(slots, x, dy.len()), dy, 1.0);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    axpy(slot(slots, *a, dy.len()), dy, 1.0);
                }
                if self.ng(*row) {
                    let d = self.value(*row).numel();
                    let g = slot(slots, *row, d);
                    for chunk in dy.chunks(d) {
                        axpy(g, chunk, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.value(*b).data();
                    let g = slot(slots, *a, dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * bv[j];
                    }
                }
                if self.ng(*b) {
                    let av = self.value(*a).data();
                    let g = slot(slots, *b, dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * av[j];
                    }
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row).data();
                let d = r.len();
                if self.ng(*a) {
                    let g = slot(slots, *a, dy.len());
                    for (j, x) in g.iter_mut().enumerate() {
                        *x += dy[j] * r[j % d];
                    }
                }
                if self.ng(*row) {
                    let av = self.value(*a).data();
                    let g = slot(slots, *row, d);
                    for j in 0..dy.len() {
                        g[j % d] += dy[j] * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    axpy(slot(slots, *a, dy.len()), dy, *c);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.ng(p) {
                        axpy(slot(slots, p, len), &dy[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let n = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let g = slot(slots, p, n * c);
                        for r in 0..n {
                            axpy(
                                &mut g[r * c..(r + 1) * c],
                                &dy[r * total + off..r * total + off + c],
                                1.0,
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let d = self.value(*a).cols();
                    let len = self.value(*a).numel();
                    let g = slot(slots, *a, len);
                    axpy(&mut g[start * d..start * d + dy.len()], dy, 1.0);
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let src = self.value(*a);
                    let (n, d) = (src.rows(), src.cols());
                    let len = node.value.cols();
                    let g = slot(slots, *a, n * d);
                    for r in 0..n {
                        axpy(
                            &mut g[r * d + start..r * d + start + len],
                            &dy[r * len..(r + 1) * len],
                            1.0,
                        );
                    }
                }
            }
            Op::RowGather(a, rows) => {
                if self.ng(*a) {
                    let src = self.value(*a);
                    let d = src.cols();
                    let g = slot(slots, *a, src.numel());
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut g[r * d..(r + 1) * d], &dy[k * d..(k + 1) * d], 1.0);
                    }
                }
            }
            Op::Gather(a, idx) => {
                if self.ng(*a) {
                    let g = slot(slots, *a, self.value(*a).numel());
                    for (k, j) in idx.iter().enumerate() {
                        if let Some(j) = j {
                            g[*j] += dy[k];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.ng(*a) {
                    axpy(slot(slots, *a, dy.len()), dy, 1.0);
                }
            }
            Op::Softmax(a) => {
                if self.ng(*a) {
                    let y = node.value.data();
                    let d = node.value.cols();
                    let g = slot(slots, *a, dy.len());
                    softmax_backward(y, dy, d, g);
                }
            }
            Op::LayerNorm { x, xhat, rstd } => {
                if self.ng(*x) {
                    let d = node.value.cols();
                    let g = slot(slots, *x, dy.len());
                    for (r, ((gr, dyr), xh)) in g
                        .chunks_mut(d)
                        .zip(dy.chunks(d))
                        .zip(xhat.chunks(d))
                        .enumerate()
                    {
                        let s1: f64 = dyr.iter().sum();
                        let s2: f64 = dyr.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = rstd[r] / d as f64;
                        for j in 0..d {
                            gr[j] += k * (d as f64 * dyr[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let xv = self.value(*a).data();
                    let g = slot(slots, *a, dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * gelu_grad(xv[j]);
                    }
                }
            }
            Op::Tanh(a) => {
                if self.ng(*a) {
                    let y = node.value.data();
                    let g = slot(slots, *a, dy.len());
                    for j in 0..dy.len() {
                        g[j] += dy[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Attention(rec) => self.attention_backward(rec, dy, slots),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                divisor,
                probs,
            } => {
                if self.ng(*logits) {
                    let c = self.value(*logits).cols();
                    let g = slot(slots, *logits, probs.len());
                    let up = dy[0] / divisor;
                    for (r, (gr, pr)) in g.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        let w = weights[r];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let ind = if j == targets[r] { 1.0 } else { 0.0 };
                            gr[j] += up * w * (pr[j] - ind);
                        }
                    }
                }
            }
            Op::L1(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let sign: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let s = x - y;
                        if s > 0.0 {
                            dy[0]
                        } else if s < 0.0 {
                            -dy[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.ng(*a) {
                    axpy(slot(slots, *a, sign.len()), &sign, 1.0);
                }
                if self.ng(*b) {
                    axpy(slot(slots, *b, sign.len()), &sign, -1.0);
                }
            }
            Op::CosineRows { a, b, na, nb } => {
                let d = self.value(*a).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let cvals = node.value.data();
                for (which, this, other, nthis, nother) in
                    [(*a, av, bv, na, nb), (*b, bv, av, nb, na)]
                {
                    if !self.ng(which) {
                        continue;
                    }
                    let g = slot(slots, which, av.len());
                    for r in 0..cvals.len() {
                        let inv = 1.0 / (nthis[r] * nother[r]);
                        let cc = cvals[r] / (nthis[r] * nthis[r]);
                        for j in 0..d {
                            let k = r * d + j;
                            g[k] += dy[r] * (other[k] * inv - cc * this[k]);
                        }
                    }
                }
            }
            Op::BilinearSample { fmap, locs } => self.bilinear_backward(*fmap, *locs, dy, slots),
            Op::WeightedRowSum(w, v) => {
                let (ws, vs) = (self.shape(*w).to_vec(), self.shape(*v).to_vec());
                let (q, s, d) = (ws[0], ws[1], vs[1]);
                if self.ng(*w) {
                    let vd = self.value(*v).data();
                    let g = slot(slots, *w, q * s);
                    for i in 0..q {
                        let dyr = &dy[i * d..(i + 1) * d];
                        for j in 0..s {
                            let row = &vd[(i * s + j) * d..(i * s + j + 1) * d];
                            g[i * s + j] += dyr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if self.ng(*v) {
                    let wd = self.value(*w).data();
                    let g = slot(slots, *v, q * s * d);
                    for i in 0..q {
                        let dyr = &dy[i * d..(i + 1) * d];
                        for j in 0..s {
                            let wt = wd[i * s + j];
                            if wt != 0.0 {
                                axpy(&mut g[(i * s + j) * d..(i * s + j + 1) * d], dyr, wt);
                            }
                        }
                    }
                }
            }
            Op::SegmentSum { w, v, seg } => {
                let d = self.value(*v).cols();
                if self.ng(*w) {
                    let vd = self.value(*v).data();
                    let g = slot(slots, *w, seg.len());
                    for (i, &r) in seg.iter().enumerate() {
                        g[i] += dy[r * d..(r + 1) * d].iter().zip(&vd[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.ng(*v) {
                    let wd = self.value(*w).data();
                    let g = slot(slots, *v, seg.len() * d);
                    for (i, &r) in seg.iter().enumerate() {
                        axpy(&mut g[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d], wd[i]);
                    }
                }
            }
            Op::SumAll(a) => {
                if self.ng(*a) {
                    let n = self.value(*a).numel();
                    for x in slot(slots, *a, n).iter_mut() {
                        *x += dy[0];
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let src = self.value(*a);
                    let (n, d) = (src.rows(), src.cols());
                    let g = slot(slots, *a, n * d);
                    for chunk in g.chunks_mut(d) {
                        axpy(chunk, dy, 1.0 / n as f64);
                    }
                }
            }
        }
    }

    fn attention_backward(&self, rec: &AttentionRecord, dy: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let (q, k, v) = (rec.q, rec.k, rec.v);
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        let (heads, groups) = (rec.heads, rec.groups);
        let (n, m) = (qs[0] / groups, ks[0] / groups);
        let (qc, kc, vc) = (qs[1], ks[1], vs[1]);
        let (dh, dv) = (qc / heads, vc / heads);
        if n == 0 || m == 0 {
            return;
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = self.ng(q).then(|| vec![0.0; qd.len()]);
        let mut dk = self.ng(k).then(|| vec![0.0; kd.len()]);
        let mut dvv = self.ng(v).then(|| vec![0.0; vd.len()]);
        let mut dp = vec![0.0; n * m];
        let mut ds = vec![0.0; n * m];
        for g in 0..groups {
            for h in 0..heads {
                let p = &rec.probs[(g * heads + h) * n * m..(g * heads + h + 1) * n * m];
                let dy_off = &dy[g * n * vc + h * dv..];
                if let Some(dvv) = dvv.as_mut() {
                    gemm(m, n, dv, p, (1, m), dy_off, (vc, 1), &mut dvv[g * m * vc + h * dv..], (vc, 1), true);
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                gemm(n, dv, m, dy_off, (vc, 1), &vd[g * m * vc + h * dv..], (1, vc), &mut dp, (m, 1), false);
                softmax_backward_into(p, &dp, m, &mut ds);
                for x in ds.iter_mut() {
                    *x *= rec.scale;
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(n, m, dh, &ds, (m, 1), &kd[g * m * kc + h * dh..], (kc, 1), &mut dq[g * n * qc + h * dh..], (qc, 1), true);
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(m, n, dh, &ds, (1, m), &qd[g * n * qc + h * dh..], (qc, 1), &mut dk[g * m * kc + h * dh..], (kc, 1), true);
                }
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dvv)] {
            if let Some(gr) = grad {
                axpy(slot(slots, var, gr.len()), &gr, 1.0);
            }
        }
    }

    fn bilinear_backward(&self, fmap: Var, locs: Var, dy: &[f64], slots: &mut [Option<Vec<f64>>]) {
        let fs = self.shape(fmap);
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let l = self.value(locs).data().to_vec();
        let n = l.len() / 2;
        if self.ng(fmap) {
            let g = slot(slots, fmap, c * h * w);
            for s in 0..n {
                for (idx, wt) in bilinear_corners(l[2 * s], l[2 * s + 1], h, w).iter().flatten() {
                    for ch in 0..c {
                        g[ch * h * w + idx] += wt * dy[s * c + ch];
                    }
                }
            }
        }
        if self.ng(locs) {
            let f = self.value(fmap).data();
            let g = slot(slots, locs, 2 * n);
            for s in 0..n {
                let (u, v) = (l[2 * s], l[2 * s + 1]);
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let (ui, vi) = (u0 as i64, v0 as i64);
                let texel = |ii: i64, jj: i64, ch: usize| -> f64 {
                    if ii < 0 || jj < 0 || ii >= h as i64 || jj >= w as i64 {
                        0.0
                    } else {
                        f[ch * h * w + ii as usize * w + jj as usize]
                    }
                };
                let (mut du, mut dv) = (0.0, 0.0);
                for ch in 0..c {
                    let t00 = texel(vi, ui, ch);
                    let t01 = texel(vi, ui + 1, ch);
                    let t10 = texel(vi + 1, ui, ch);
                    let t11 = texel(vi + 1, ui + 1, ch);
                    let dd = dy[s * c + ch];
                    du += dd * ((1.0 - fv) * (t01 - t00) + fv * (t11 - t10));
                    dv += dd * ((1.0 - fu) * (t10 - t00) + fu * (t11 - t01));
                }
                g[2 * s] += du;
                g[2 * s + 1] += dv;
            }
        }
    }
}

fn slot<'a>(slots: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    slots[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (p, q) in y.iter_mut().zip(x) {
        *p += a * q;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn softmax_backward(y: &[f64], dy: &[f64], d: usize, g: &mut [f64]) {
    for ((yr, dyr), gr) in y.chunks(d).zip(dy.chunks(d)).zip(g.chunks_mut(d)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            gr[j] += yr[j] * (dyr[j] - dot);
        }
    }
}

fn softmax_backward_into(y: &[f64], dy: &[f64], d: usize, out: &mut [f64]) {
    for ((yr, dyr), o) in y.chunks(d).zip(dy.chunks(d)).zip(out.chunks_mut(d)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            o[j] = yr[j] * (dyr[j] - dot);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Flat texel indices and weights of the four bilinear neighbours; `None`
/// for neighbours outside the map.
pub(crate) fn bilinear_corners(u: f64, v: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let (u0, v0) = (u.floor(), v.floor());
    let (fu, fv) = (u - u0, v - v0);
    let (ui, vi) = (u0 as i64, v0 as i64);
    let at = |ii: i64, jj: i64, wt: f64| -> Option<(usize, f64)> {
        if ii < 0 || jj < 0 || ii >= h as i64 || jj >= w as i64 || wt == 0.0 {
            None
        } else {
            Some((ii as usize * w + jj as usize, wt))
        }
    };
    [
        at(vi, ui, (1.0 - fu) * (1.0 - fv)),
        at(vi, ui + 1, fu * (1.0 - fv)),
        at(vi + 1, ui, (1.0 - fu) * fv),
        at(vi + 1, ui + 1, fu * fv),
    ]
}
