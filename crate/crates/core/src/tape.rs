//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward rule. Nodes only reference earlier nodes, so the
//! tape is a DAG in index order and [`Tape::backward`] walks it once in
//! reverse. A fresh tape is built for every forward pass.
//!
//! Reductions (matmul, softmax, log-sum-exp, row norms) accumulate in `f64`;
//! stored values are `f32`. Every primitive rejects non-finite output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added inside the root-mean-square of [`Tape::rmsnorm`].
pub const RMS_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused causal grouped-query attention call.
///
/// Rows of q/k/v are `batch * seq` tokens, sequence-major. Query head `a`
/// reads KV head `a * kv_heads / heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttnGeometry {
    pub fn kv_head_of(&self, head: usize) -> usize {
        head * self.kv_heads / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Swish,
    SoftmaxRows,
    RmsNorm,
    Embed,
    CrossEntropyMean,
    Sum,
    Scale,
    CausalAttention,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul,
    Add,
    Mul,
    Swish,
    SoftmaxRows,
    RmsNorm { inv_rms: Vec<f64> },
    Embed { ids: Vec<usize> },
    CrossEntropyMean { targets: Vec<Option<usize>>, count: usize },
    Sum,
    Scale(f32),
    CausalAttention { geom: AttnGeometry, probs: Vec<f32> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Swish => OpKind::Swish,
            Op::SoftmaxRows => OpKind::SoftmaxRows,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Embed { .. } => OpKind::Embed,
            Op::CrossEntropyMean { .. } => OpKind::CrossEntropyMean,
            Op::Sum => OpKind::Sum,
            Op::Scale(_) => OpKind::Scale,
            Op::CausalAttention { .. } => OpKind::CausalAttention,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Gradients are only tracked for leaves
    /// created with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last [`Tape::backward`] target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Attention probabilities saved by a [`Tape::causal_attention`] node,
    /// laid out `[batch, heads, seq, seq]` with zeros above the diagonal.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnGeometry, &[f32])> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { geom, probs } => Some((geom, probs)),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(op.kind()),
            });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("matmul")?;
        let (k2, m) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let out = gemm(
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            n,
            k,
            m,
        );
        self.push(Op::MatMul, vec![a, b], Tensor::new(vec![n, m], out)?)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| shape_pair("add", self.value(a), self.value(b)))?;
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| shape_pair("mul", self.value(a), self.value(b)))?;
        self.push(Op::Mul, vec![a, b], out)
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| (v as f64 * sigmoid(v as f64)) as f32);
        self.push(Op::Swish, vec![x], out)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(factor), vec![x], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s as f32))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = vec![0f32; t.len()];
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(src, dst);
        }
        let shape = t.shape().to_vec();
        self.push(Op::SoftmaxRows, vec![x], Tensor::new(shape, out)?)
    }

    /// Row-wise `x / rms(x) * scale`, `rms = sqrt(mean(x^2) + 1e-6)`.
    pub fn rmsnorm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let s = self.value(scale);
        if s.shape() != [c] {
            return Err(shape_pair("rmsnorm", t, s));
        }
        let sd = s.data();
        let mut out = vec![0f32; t.len()];
        let mut inv_rms = Vec::with_capacity(t.len() / c);
        for (src, dst) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            let ms = src.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for ((o, &v), &g) in dst.iter_mut().zip(src).zip(sd) {
                *o = (v as f64 * r * g as f64) as f32;
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Op::RmsNorm { inv_rms },
            vec![x, scale],
            Tensor::new(shape, out)?,
        )
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2("embed")?;
        if ids.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("embed", format!("row {id} of {rows}")));
            }
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        self.push(
            Op::Embed { ids: ids.to_vec() },
            vec![table],
            Tensor::new(vec![ids.len(), d], out)?,
        )
    }

    /// Mean of `-log softmax(logits)[target]` over rows with a target.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = t.dims2("cross_entropy_mean")?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy_mean",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        let mut total = 0f64;
        let mut count = 0usize;
        for (row, target) in t.data().chunks(v).zip(targets) {
            if let Some(tg) = *target {
                if tg >= v {
                    return Err(Error::shape(
                        "cross_entropy_mean",
                        format!("target {tg} of {v}"),
                    ));
                }
                total += log_sum_exp(row) - row[tg] as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let loss = (total / count as f64) as f32;
        self.push(
            Op::CrossEntropyMean {
                targets: targets.to_vec(),
                count,
            },
            vec![logits],
            Tensor::scalar(loss),
        )
    }

    /// Fused causal attention `softmax(q k^T / sqrt(d_h)) v` for every
    /// (sequence, query head) pair, with K/V shared across each query group.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, geom: AttnGeometry) -> Result<Var> {
        let AttnGeometry {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim: dh,
        } = geom;
        if heads == 0 || kv_heads == 0 || heads % kv_heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("{heads} heads over {kv_heads} kv heads"),
            ));
        }
        let rows = batch * seq;
        let want = |t: &Tensor, width: usize| t.shape() == [rows, width];
        if !want(self.value(q), heads * dh)
            || !want(self.value(k), kv_heads * dh)
            || !want(self.value(v), kv_heads * dh)
        {
            return Err(Error::shape(
                "causal_attention",
                format!(
                    "q {:?} k {:?} v {:?} for {geom:?}",
                    self.value(q).shape(),
                    self.value(k).shape(),
                    self.value(v).shape()
                ),
            ));
        }
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (qw, kw) = (heads * dh, kv_heads * dh);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0f32; batch * heads * seq * seq];
        let mut out = vec![0f32; rows * qw];
        let mut scores = vec![0f64; seq];
        let mut acc = vec![0f64; dh];
        for b in 0..batch {
            for a in 0..heads {
                let g = geom.kv_head_of(a);
                for t in 0..seq {
                    let qrow = &qd[(b * seq + t) * qw + a * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                        let krow = &kd[(b * seq + s) * kw + g * dh..][..dh];
                        let dot: f64 = qrow
                            .iter()
                            .zip(krow)
                            .map(|(&x, &y)| x as f64 * y as f64)
                            .sum();
                        *sc = dot * inv_sqrt;
                        max = max.max(*sc);
                    }
                    let mut z = 0f64;
                    for sc in scores.iter_mut().take(t + 1) {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    acc.iter_mut().for_each(|x| *x = 0.0);
                    let prow = &mut probs[((b * heads + a) * seq + t) * seq..][..seq];
                    for s in 0..=t {
                        let p = scores[s] / z;
                        prow[s] = p as f32;
                        let vrow = &vd[(b * seq + s) * kw + g * dh..][..dh];
                        for (x, &y) in acc.iter_mut().zip(vrow) {
                            *x += p * y as f64;
                        }
                    }
                    let orow = &mut out[(b * seq + t) * qw + a * dh..][..dh];
                    for (o, &x) in orow.iter_mut().zip(&acc) {
                        *o = x as f32;
                    }
                }
            }
        }
        self.push(
            Op::CausalAttention { geom, probs },
            vec![q, k, v],
            Tensor::new(vec![rows, qw], out)?,
        )
    }

    /// Populates gradients of `output` on every leaf created with
    /// `requires_grad`. Leaves the output does not depend on get zeros.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_shape = self.value(output).shape().to_vec();
        if out_shape != [1] {
            return Err(Error::NonScalar(out_shape));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bad) = node.inputs.iter().find(|v| v.0 >= i) {
                return Err(Error::TapeCycle {
                    node: i,
                    input: bad.0,
                });
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g)?;
            for (input, local) in node.inputs.iter().zip(contributions) {
                let Some(local) = local else { continue };
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(local),
                }
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, g: &[f32]) -> Result<Vec<Option<Vec<f32>>>> {
        let node = &self.nodes[i];
        let input = |j: usize| &self.nodes[node.inputs[j].0].value;
        let wants = |j: usize| self.nodes[node.inputs[j].0].needs_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (n, k) = a.dims2("matmul")?;
                let m = b.cols();
                let da = wants(0).then(|| gemm(g, false, b.data(), true, n, m, k));
                let db = wants(1).then(|| gemm(a.data(), true, g, false, k, n, m));
                vec![da, db]
            }
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let da = g.iter().zip(b.data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(a.data()).map(|(x, y)| x * y).collect();
                vec![Some(da), Some(db)]
            }
            Op::Swish => {
                let x = input(0);
                let dx = g
                    .iter()
                    .zip(x.data())
                    .map(|(&gy, &xv)| {
                        let s = sigmoid(xv as f64);
                        (gy as f64 * (s + xv as f64 * s * (1.0 - s))) as f32
                    })
                    .collect();
                vec![Some(dx)]
            }
            Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
            Op::Sum => vec![Some(vec![g[0]; input(0).len()])],
            Op::SoftmaxRows => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = vec![0f32; y.len()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (yv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                vec![Some(dx)]
            }
            Op::RmsNorm { inv_rms } => {
                let (x, scale) = (input(0), input(1));
                let c = x.cols();
                let sd = scale.data();
                let mut dx = vec![0f32; x.len()];
                let mut dscale = vec![0f64; c];
                for (((xr, gr), dr), &r) in x
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .zip(inv_rms)
                {
                    let mut dot = 0f64;
                    for j in 0..c {
                        let xhat = xr[j] as f64 * r;
                        dscale[j] += gr[j] as f64 * xhat;
                        dot += gr[j] as f64 * sd[j] as f64 * xhat;
                    }
                    let mean = dot / c as f64;
                    for j in 0..c {
                        let xhat = xr[j] as f64 * r;
                        dr[j] = (r * (gr[j] as f64 * sd[j] as f64 - xhat * mean)) as f32;
                    }
                }
                vec![Some(dx), Some(dscale.into_iter().map(|v| v as f32).collect())]
            }
            Op::Embed { ids } => {
                let table = input(0);
                let d = table.cols();
                let mut dt = vec![0f32; table.len()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(dt)]
            }
            Op::CrossEntropyMean { targets, count } => {
                let logits = input(0);
                let v = logits.cols();
                let scale = g[0] as f64 / *count as f64;
                let mut dl = vec![0f32; logits.len()];
                let mut p = vec![0f32; v];
                for ((row, dr), target) in logits.data().chunks(v).zip(dl.chunks_mut(v)).zip(targets)
                {
                    let Some(tg) = *target else { continue };
                    softmax_into(row, &mut p);
                    for (d, &pv) in dr.iter_mut().zip(&p) {
                        *d = (pv as f64 * scale) as f32;
                    }
                    dr[tg] -= scale as f32;
                }
                vec![Some(dl)]
            }
            Op::CausalAttention { geom, probs } => {
                let (dq, dk, dv) = attention_backward(geom, probs, input(0), input(1), input(2), g);
                vec![Some(dq), Some(dk), Some(dv)]
            }
        })
    }
}

fn attention_backward(
    geom: &AttnGeometry,
    probs: &[f32],
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let AttnGeometry {
        batch,
        seq,
        heads,
        kv_heads,
        head_dim: dh,
    } = *geom;
    let (qw, kw) = (heads * dh, kv_heads * dh);
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![0f64; q.len()];
    let mut dk = vec![0f64; k.len()];
    let mut dv = vec![0f64; v.len()];
    let mut dp = vec![0f64; seq];
    for b in 0..batch {
        for a in 0..heads {
            let grp = geom.kv_head_of(a);
            for t in 0..seq {
                let go = &g[(b * seq + t) * qw + a * dh..][..dh];
                let prow = &probs[((b * heads + a) * seq + t) * seq..][..seq];
                let mut dot = 0f64;
                for s in 0..=t {
                    let voff = (b * seq + s) * kw + grp * dh;
                    let vrow = &vd[voff..voff + dh];
                    let p = prow[s] as f64;
                    let mut acc = 0f64;
                    for j in 0..dh {
                        acc += go[j] as f64 * vrow[j] as f64;
                        dv[voff + j] += p * go[j] as f64;
                    }
                    dp[s] = acc;
                    dot += p * acc;
                }
                let qoff = (b * seq + t) * qw + a * dh;
                for s in 0..=t {
                    let ds = prow[s] as f64 * (dp[s] - dot) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    let koff = (b * seq + s) * kw + grp * dh;
                    for j in 0..dh {
                        dq[qoff + j] += ds * kd[koff + j] as f64;
                        dk[koff + j] += ds * qd[qoff + j] as f64;
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    (cast(dq), cast(dk), cast(dv))
}

fn shape_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::MatMul => "matmul",
        OpKind::Add => "add",
        OpKind::Mul => "mul",
        OpKind::Swish => "swish",
        OpKind::SoftmaxRows => "softmax_rows",
        OpKind::RmsNorm => "rmsnorm",
        OpKind::Embed => "embed",
        OpKind::CrossEntropyMean => "cross_entropy_mean",
        OpKind::Sum => "sum",
        OpKind::Scale => "scale",
        OpKind::CausalAttention => "causal_attention",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let mut z = 0f64;
    for &v in src {
        z += (v as f64 - max).exp();
    }
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = ((v as f64 - max).exp() / z) as f32;
    }
}

/// Row-major `op(A)[m,k] x op(B)[k,n]` with `f64` accumulation. `trans_a`
/// means the stored buffer is `[k, m]`; `trans_b` means it is `[n, k]`.
pub(crate) fn gemm(
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f32> {
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut c = vec![0f64; m * n];
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds views of buffers sized m*k, k*n and m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            rsa,
            csa,
            b64.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c.into_iter().map(|v| v as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), false);
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), false);
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(a).data());
    }

    #[test]
    fn transposed_gemm_variants() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        assert_eq!(gemm(&a, false, &b, false, 2, 2, 2), vec![19., 22., 43., 50.]);
        assert_eq!(gemm(&a, true, &b, false, 2, 2, 2), vec![26., 30., 38., 44.]);
        assert_eq!(gemm(&a, false, &b, true, 2, 2, 2), vec![17., 23., 39., 53.]);
    }

    #[test]
    fn swish_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 1.0]), false);
        let y = tape.swish(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((out[1] as f64 - expected).abs() < 1e-7);
        assert!((out[1] - 0.731_058_6).abs() < 1e-6);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]), false);
        let y = tape.softmax_rows(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1], &[3.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let f = tape.sum(sq).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_output_gives_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, -2.0]), true);
        let c = tape.leaf(t(&[2], &[4.0, 5.0]), false);
        let f = tape.sum(c).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(w, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(w + w) -> df/dw = 2
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let y = tape.add(w, w).unwrap();
        let f = tape.sum(y).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2., 2., 2.]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        let c = tape.leaf(Tensor::zeros(&[3, 2]), false);
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[1], f32::MAX), false);
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn rmsnorm_unit_rms_before_scale() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[1., -2., 3., 0.5, 10., 20., -30., 1.]), false);
        let s = tape.leaf(Tensor::full(&[4], 1.0), false);
        let y = tape.rmsnorm(x, s).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let rms = (row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 4.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3, 258]), false);
        let l = tape.cross_entropy_mean(x, &[Some(0), None, Some(257)]).unwrap();
        assert!((tape.value(l).data()[0] as f64 - 258f64.ln()).abs() < 1e-5);
        assert!(tape.cross_entropy_mean(x, &[None, None, None]).is_err());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let geom = AttnGeometry {
            batch: 2,
            seq: 5,
            heads: 4,
            kv_heads: 2,
            head_dim: 3,
        };
        let mut rng = crate::rng::SplitMix64::new(3);
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::randn(&[10, 12], 1.0, &mut rng), false);
        let k = tape.leaf(Tensor::randn(&[10, 6], 1.0, &mut rng), false);
        let v = tape.leaf(Tensor::randn(&[10, 6], 1.0, &mut rng), false);
        let o = tape.causal_attention(q, k, v, geom).unwrap();
        let (_, probs) = tape.attention_probs(o).unwrap();
        for (r, row) in probs.chunks(5).enumerate() {
            let t = r % 5;
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row[t + 1..].iter().all(|&p| p == 0.0));
        }
    }
}
