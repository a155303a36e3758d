//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A forward pass records every operation on a [`Tape`]. Leaves marked as
//! requiring gradients (trainable parameters, or inputs under test) are the
//! only nodes whose gradients get materialized; everything downstream of a
//! frozen leaf alone is treated as a constant during [`Tape::backward`].

use crate::error::{GagError, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

const RMS_EPS: f64 = 1e-5;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one causal sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    SumSquares(Var),
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<Tensor<F>> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, var: Var) -> (usize, usize) {
        let t = &self.nodes[var.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let bt = &self.nodes[b.0].value;
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(GagError::Dimension(format!("matmul ({}x{}) x {:?}", m, k, bt.shape())));
        }
        let n = bt.shape()[1];
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            bt.data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(GagError::Dimension(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let c = tx.cols();
        if tb.len() != c {
            return Err(GagError::Dimension(format!(
                "bias of length {} for {} columns",
                tb.len(),
                c
            )));
        }
        let b = tb.data();
        let out: Vec<F> = tx.data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(GagError::Dimension(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let value = self.nodes[x.0].value.map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (r, c) = (tx.rows(), tx.cols());
        if tw.len() != c {
            return Err(GagError::Dimension(format!(
                "rms gain of length {} for {} columns",
                tw.len(),
                c
            )));
        }
        let eps = F::c(RMS_EPS);
        let inv_n = F::one() / F::c(c as f64);
        let mut out = vec![F::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = tx.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<F>() * inv_n;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * tw.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(GagError::Dimension(format!("row {} of table with {} rows", id, v)));
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.nodes[x.0].value.slice_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.nodes[p.0].value.cols())
            .ok_or_else(|| GagError::Dimension("concat of nothing".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != cols {
                return Err(GagError::Dimension(format!(
                    "concat of {} and {} columns",
                    cols,
                    t.cols()
                )));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Multi-head causal self-attention over packed segments. `q`, `k`, `v`
    /// are `rows x d`; attention never crosses a segment boundary.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[Segment]) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) || self.dims(v) != (rows, d) {
            return Err(GagError::Dimension("q/k/v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(GagError::Dimension(format!("{} heads for width {}", heads, d)));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != rows || segments.iter().any(|s| s.start + s.len > rows) {
            return Err(GagError::Dimension("segments do not tile the rows".into()));
        }
        let dh = d / heads;
        let scale = F::one() / F::c(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut out = vec![F::zero(); rows * d];
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![F::zero(); total];
        let mut off = 0;
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let p = &mut probs[off..off + t * t];
                for i in 0..t {
                    let qi = &qd[(seg.start + i) * d + h * dh..][..dh];
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        let kj = &kd[(seg.start + j) * d + h * dh..][..dh];
                        let s = dot(qi, kj) * scale;
                        p[i * t + j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = F::zero();
                    for j in 0..=i {
                        let e = (p[i * t + j] - max).exp();
                        p[i * t + j] = e;
                        sum += e;
                    }
                    let o = &mut out[(seg.start + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let w = p[i * t + j] / sum;
                        p[i * t + j] = w;
                        let vj = &vd[(seg.start + j) * d + h * dh..][..dh];
                        for (oo, &vv) in o.iter_mut().zip(vj) {
                            *oo += w * vv;
                        }
                    }
                }
                off += t * t;
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over unmasked rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, v) = self.dims(logits);
        if targets.len() != r || mask.len() != r {
            return Err(GagError::Dimension(format!(
                "{} logit rows, {} targets, {} mask entries",
                r,
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(GagError::DegenerateMask);
        }
        let lt = &self.nodes[logits.0].value;
        let mut probs = vec![F::zero(); r * v];
        let mut total = F::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(GagError::TokenRange {
                    id: targets[i] as u32,
                    vocab: v,
                });
            }
            let row = lt.row(i);
            let lse = log_sum_exp(row);
            total += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = total / F::c(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().map(|&v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(GagError::Dimension(format!(
                "backward from non-scalar of shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(GagError::Numeric("loss is not finite".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate_into<'g>(&self, grads: &'g mut [Option<Vec<F>>], var: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.value.cols();
                let bv = self.nodes[b.0].value.data();
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.accumulate_into(grads, *a) {
                    F::gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.accumulate_into(grads, *b) {
                    F::gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.accumulate_into(grads, v) {
                        add_assign(gv, g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    add_assign(gx, g);
                }
                let c = node.value.cols();
                if let Some(gb) = self.accumulate_into(grads, *bias) {
                    for row in g.chunks(c) {
                        add_assign(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if let Some(ga) = self.accumulate_into(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.accumulate_into(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * *s;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xt = &self.nodes[x.0].value;
                let wv = self.nodes[w.0].value.data();
                let (r, c) = (xt.rows(), xt.cols());
                if let Some(gw) = self.accumulate_into(grads, *w) {
                    for i in 0..r {
                        let row = xt.row(i);
                        for j in 0..c {
                            gw[j] += g[i * c + j] * row[j] * inv_rms[i];
                        }
                    }
                }
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    let inv_n = F::one() / F::c(c as f64);
                    for i in 0..r {
                        let row = xt.row(i);
                        let inv = inv_rms[i];
                        let mut dot_gwx = F::zero();
                        for j in 0..c {
                            dot_gwx += g[i * c + j] * wv[j] * row[j];
                        }
                        let coef = dot_gwx * inv * inv * inv * inv_n;
                        for j in 0..c {
                            gx[i * c + j] += g[i * c + j] * wv[j] * inv - row[j] * coef;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                if let Some(gt) = self.accumulate_into(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.cols();
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    add_assign(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.accumulate_into(grads, *p) {
                        add_assign(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, segments, probs),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.nodes[logits.0].value.cols();
                let scale = g[0] / F::c(*count as f64);
                if let Some(gl) = self.accumulate_into(grads, *logits) {
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += probs[i * v + j] * scale;
                        }
                        gl[i * v + t] -= scale;
                    }
                }
            }
            Op::SumSquares(x) => {
                let xv = self.nodes[x.0].value.data();
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    let two = F::c(2.0);
                    for i in 0..xv.len() {
                        gx[i] += two * xv[i] * g[0];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.accumulate_into(grads, *x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[F],
        grads: &mut [Option<Vec<F>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        segments: &[Segment],
        probs: &[F],
    ) {
        let (_, d) = self.dims(q);
        let dh = d / heads;
        let scale = F::one() / F::c(dh as f64).sqrt();
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let len = qd.len();
        let need = [q, k, v].map(|x| self.nodes[x.0].requires_grad);
        let mut gq = vec![F::zero(); if need[0] { len } else { 0 }];
        let mut gk = vec![F::zero(); if need[1] || need[0] { len } else { 0 }];
        let mut gv = vec![F::zero(); if need[2] { len } else { 0 }];
        let need_scores = need[0] || need[1];
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in segments {
            let t = seg.len;
            for h in 0..heads {
                let p = &probs[off..off + t * t];
                for i in 0..t {
                    let gi = &g[(seg.start + i) * d + h * dh..][..dh];
                    if need[2] {
                        for j in 0..=i {
                            let w = p[i * t + j];
                            let gvj = &mut gv[(seg.start + j) * d + h * dh..][..dh];
                            for (a, &b) in gvj.iter_mut().zip(gi) {
                                *a += w * b;
                            }
                        }
                    }
                    if !need_scores {
                        continue;
                    }
                    dp.clear();
                    let mut weighted = F::zero();
                    for j in 0..=i {
                        let vj = &vd[(seg.start + j) * d + h * dh..][..dh];
                        let x = dot(gi, vj);
                        dp.push(x);
                        weighted += x * p[i * t + j];
                    }
                    let qi_off = (seg.start + i) * d + h * dh;
                    for j in 0..=i {
                        let ds = p[i * t + j] * (dp[j] - weighted) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let kj_off = (seg.start + j) * d + h * dh;
                        if need[0] {
                            for c in 0..dh {
                                gq[qi_off + c] += ds * kd[kj_off + c];
                            }
                        }
                        if need[1] {
                            for c in 0..dh {
                                gk[kj_off + c] += ds * qd[qi_off + c];
                            }
                        }
                    }
                }
                off += t * t;
            }
        }
        if let Some(acc) = self.accumulate_into(grads, q) {
            add_assign(acc, &gq);
        }
        if let Some(acc) = self.accumulate_into(grads, k) {
            add_assign(acc, &gk);
        }
        if let Some(acc) = self.accumulate_into(grads, v) {
            add_assign(acc, &gv);
        }
    }
}

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub(crate) fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    F::c(0.5) * x * (F::one() + (x / F::c(std::f64::consts::SQRT_2)).erf())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let cdf = F::c(0.5) * (F::one() + (x / F::c(std::f64::consts::SQRT_2)).erf());
    let pdf = (-(x * x) * F::c(0.5)).exp() / F::c((2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
