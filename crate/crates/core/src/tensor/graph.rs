//! The computation tape.
//!
//! A [`Graph`] is an append-only list of nodes. Each op validates shapes,
//! computes its value eagerly and records what it needs for the backward
//! pass. Node inputs always precede their outputs, so a reverse sweep over
//! the node list is a valid topological order.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::{gemm_acc, gemm_nt_acc, gemm_tn_acc, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Softplus(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    GatherSum {
        x: usize,
        groups: Vec<Vec<(usize, f64)>>,
    },
    CosineRows {
        a: usize,
        b: usize,
        dots: Vec<f64>,
        na: Vec<f64>,
        nb: Vec<f64>,
        denom: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        spec: Arc<AttnSpec>,
        probs: Vec<f64>,
    },
    Cosine {
        a: usize,
        b: usize,
        dot: f64,
        na: f64,
        nb: f64,
        denom: f64,
        guarded: bool,
    },
}

/// One attention block: queries `q_start..q_start+q_len` attend to keys
/// `k_start..k_start+k_len` of the key/value inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// `false` marks a padded key that receives zero weight.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnSegment {
    pub fn square(start: usize, len: usize) -> Self {
        AttnSegment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            key_valid: None,
        }
    }

    fn allowed(&self, causal: bool, i: usize, j: usize) -> bool {
        !(causal && j > i) && self.key_valid.as_ref().is_none_or(|m| m[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
    pub segments: Vec<AttnSegment>,
}

impl AttnSpec {
    /// Offset of segment `s`, head `h` in the saved probabilities; each
    /// block is `q_len x k_len`, row-major.
    pub fn prob_offset(&self, s: usize, h: usize) -> usize {
        let before: usize = self.segments[..s].iter().map(|g| g.q_len * g.k_len).sum();
        let seg = &self.segments[s];
        self.heads * before + h * seg.q_len * seg.k_len
    }

    /// Start of every segment's block in the saved probabilities.
    fn segment_bases(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut acc = 0;
        for g in &self.segments {
            out.push(acc);
            acc += self.heads * g.q_len * g.k_len;
        }
        out
    }

    fn total_probs(&self) -> usize {
        self.heads * self.segments.iter().map(|g| g.q_len * g.k_len).sum::<usize>()
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: HashMap<ParamId, usize>,
    flags: Vec<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            flags: Vec::new(),
        }
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Numerical warnings raised by guarded ops (e.g. a zero-norm cosine).
    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_arc(shape, Arc::new(data), op, requires_grad)
    }

    fn push_arc(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push_arc(shape, Arc::new(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// Insert a parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let v = self.push_arc(
            store.shape(id).to_vec(),
            store.shared(id),
            Op::Leaf,
            self.grad_enabled,
        );
        self.params.insert(id, v.0);
        v
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].dims2()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.data.as_ref().clone()).expect("node is consistent");
        t.requires_grad = n.requires_grad;
        t.grad = n.grad.clone();
        t
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, recorded on leaves only.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradients for every parameter used in this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &n)| self.nodes[n].grad.as_deref().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a.0), &[a.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Broadcast-add a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.data(bias).len() != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x.0, bias.0), &[x.0, bias.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a.0, c), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a.0), &[a.0])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| softplus(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Softplus(a.0), &[a.0])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a);
        if n == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = self.data(a).to_vec();
        for i in 0..m {
            super::softmax_in_place(&mut out[i * n..(i + 1) * n]);
        }
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a.0), &[a.0]))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if self.data(gain).len() != n || self.data(bias).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Gather rows of a `V x d` table. Backward scatter-adds, so repeated ids
    /// accumulate.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.dims2(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p);
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![m, total], out, Op::ConcatCols(ids.clone()), &ids))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (_, n) = self.dims2(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.data(p));
            rows += r;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + width > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        Ok(self.push(vec![m, width], out, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if start + count > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, count]));
        }
        let out = self.data(x)[start * n..(start + count) * n].to_vec();
        Ok(self.push(vec![count, n], out, Op::SliceRows { x: x.0, start }, &[x.0]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let data = Arc::clone(&self.nodes[x.0].data);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push_arc(shape, data, Op::Reshape(x.0), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = if d.is_empty() { 0.0 } else { d.iter().sum::<f64>() / d.len() as f64 };
        self.push(vec![], vec![s], Op::Mean(a.0), &[a.0])
    }

    /// Mean of `-log softmax(logits)[t, target_t]` over positions whose
    /// target is not `ignore_id`. Zero when every position is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: Option<usize>) -> Result<Var> {
        let (t, v) = self.dims2(logits);
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut tg = Vec::with_capacity(t);
        for &y in targets {
            if Some(y) == ignore_id {
                tg.push(None);
            } else if y >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: y,
                    size: v,
                });
            } else {
                tg.push(Some(y));
            }
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (i, y) in tg.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            let lsm = super::log_softmax(row);
            for (p, l) in row.iter_mut().zip(&lsm) {
                *p = l.exp();
            }
            if let Some(y) = *y {
                loss -= lsm[y];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { loss / count as f64 };
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: tg,
                probs,
                count,
            },
            &[logits.0],
        ))
    }

    /// Fused multi-head scaled dot-product attention over independent
    /// segments. `q` is `Rq x d`, `k` and `v` are `Rk x d`; query rows not
    /// covered by a segment produce zeros. A row whose keys are all masked
    /// also produces zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Arc<AttnSpec>) -> Result<Var> {
        let (rq, d) = self.dims2(q);
        let (rk, dk) = self.dims2(k);
        if dk != d || self.dims2(v) != (rk, d) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if spec.heads == 0 || d % spec.heads != 0 {
            return Err(Error::Contract(format!("{} heads do not divide width {d}", spec.heads)));
        }
        for seg in &spec.segments {
            if seg.q_start + seg.q_len > rq
                || seg.k_start + seg.k_len > rk
                || seg.key_valid.as_ref().is_some_and(|m| m.len() != seg.k_len)
            {
                return Err(Error::Contract(format!("attention segment {seg:?} out of range")));
            }
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rq * d];
        let mut probs = vec![0.0; spec.total_probs()];
        let mut row = Vec::new();
        let bases = spec.segment_bases();
        for (si, seg) in spec.segments.iter().enumerate() {
            for h in 0..spec.heads {
                let base = bases[si] + h * seg.q_len * seg.k_len;
                let c0 = h * dh;
                for i in 0..seg.q_len {
                    let qi = &qd[(seg.q_start + i) * d + c0..][..dh];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seg.k_len {
                        let s = if seg.allowed(spec.causal, i, j) {
                            let kj = &kd[(seg.k_start + j) * d + c0..][..dh];
                            super::dot(qi, kj) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(s);
                        row.push(s);
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[base + i * seg.k_len..][..seg.k_len];
                    let o = &mut out[(seg.q_start + i) * d + c0..][..dh];
                    for j in 0..seg.k_len {
                        let pj = row[j] / z;
                        p[j] = pj;
                        if pj != 0.0 {
                            let vj = &vd[(seg.k_start + j) * d + c0..][..dh];
                            for (ov, vv) in o.iter_mut().zip(vj) {
                                *ov += pj * vv;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![rq, d],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                spec,
                probs,
            },
            &[q.0, k.0, v.0],
        ))
    }

    /// Saved post-softmax weights of an attention node, laid out as in
    /// [`AttnSpec::prob_offset`].
    pub fn attention_probs(&self, v: Var) -> Option<(&AttnSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    /// `out[p] = sum over (row, w) in groups[p] of w * x[row]`.
    pub fn gather_sum(&mut self, x: Var, groups: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let (m, n) = self.dims2(x);
        let src = self.data(x);
        let mut out = vec![0.0; groups.len() * n];
        for (p, grp) in groups.iter().enumerate() {
            for &(r, w) in grp {
                if r >= m {
                    return Err(Error::Index {
                        what: "gather row",
                        index: r,
                        size: m,
                    });
                }
                for (o, v) in out[p * n..(p + 1) * n].iter_mut().zip(&src[r * n..(r + 1) * n]) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(vec![groups.len(), n], out, Op::GatherSum { x: x.0, groups }, &[x.0]))
    }

    /// Row-wise cosine similarity of two `m x n` matrices, as a length-`m`
    /// vector. Norm products are floored at `eps` like [`Graph::cosine`].
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (m, n) = self.dims2(a);
        let (x, y) = (self.data(a), self.data(b));
        let mut dots = Vec::with_capacity(m);
        let mut na = Vec::with_capacity(m);
        let mut nb = Vec::with_capacity(m);
        let mut denom = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        let mut guarded = 0;
        for r in 0..m {
            let (xr, yr) = (&x[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
            let d = super::dot(xr, yr);
            let (p, q) = (super::dot(xr, xr).sqrt(), super::dot(yr, yr).sqrt());
            let den = if p * q < eps {
                guarded += 1;
                eps
            } else {
                p * q
            };
            dots.push(d);
            na.push(p);
            nb.push(q);
            denom.push(den);
            out.push(d / den);
        }
        if guarded > 0 {
            self.flags.push(format!("cosine_rows: {guarded} norm products below {eps:e}"));
        }
        Ok(self.push(
            vec![m],
            out,
            Op::CosineRows {
                a: a.0,
                b: b.0,
                dots,
                na,
                nb,
                denom,
            },
            &[a.0, b.0],
        ))
    }

    /// Cosine similarity of two equal-length vectors. The norm product is
    /// floored at `eps`; a floored evaluation is recorded in [`Graph::flags`].
    pub fn cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.data(a).len() != self.data(b).len() {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.data(a), self.data(b));
        let dot = super::dot(x, y);
        let na = super::dot(x, x).sqrt();
        let nb = super::dot(y, y).sqrt();
        let prod = na * nb;
        let guarded = prod < eps;
        let denom = if guarded { eps } else { prod };
        if guarded {
            self.flags.push(format!("cosine: norm product {prod:e} below {eps:e}"));
        }
        Ok(self.push(
            vec![],
            vec![dot / denom],
            Op::Cosine {
                a: a.0,
                b: b.0,
                dot,
                na,
                nb,
                denom,
                guarded,
            },
            &[a.0, b.0],
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`, populating gradients on every
    /// leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let node = &nodes[i];
            // Accumulate into input `j` if it participates in differentiation.
            let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[j].requires_grad {
                    return;
                }
                let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].data.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    leaf_grads.push((i, g));
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[*a].dims2();
                    let (_, n) = nodes[*b].dims2();
                    acc(*a, &mut |ga| gemm_nt_acc(&g, &nodes[*b].data, ga, m, n, k));
                    acc(*b, &mut |gb| gemm_tn_acc(&nodes[*a].data, &g, gb, m, k, n));
                }
                Op::MatMulNt(a, b) => {
                    let (m, k) = nodes[*a].dims2();
                    let (n, _) = nodes[*b].dims2();
                    acc(*a, &mut |ga| gemm_acc(&g, &nodes[*b].data, ga, m, n, k));
                    acc(*b, &mut |gb| gemm_tn_acc(&g, &nodes[*a].data, gb, m, n, k));
                }
                Op::Transpose(a) => {
                    let (m, n) = nodes[*a].dims2();
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            for c in 0..n {
                                ga[r * n + c] += g[c * m + r];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| add_into(gb, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |ga| add_into(ga, &g));
                    acc(*b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(o, v)| *o -= v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].data, &nodes[*b].data);
                    acc(*a, &mut |ga| {
                        for ((o, gv), y) in ga.iter_mut().zip(&g).zip(bv.iter()) {
                            *o += gv * y;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((o, gv), x) in gb.iter_mut().zip(&g).zip(av.iter()) {
                            *o += gv * x;
                        }
                    });
                }
                Op::AddRow(x, b) => {
                    let (m, n) = nodes[*x].dims2();
                    acc(*x, &mut |gx| add_into(gx, &g));
                    acc(*b, &mut |gb| {
                        for r in 0..m {
                            add_into(gb, &g[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    acc(*a, &mut |ga| ga.iter_mut().zip(&g).for_each(|(o, v)| *o += c * v));
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].data;
                    acc(*a, &mut |ga| {
                        for ((o, gv), xv) in ga.iter_mut().zip(&g).zip(x.iter()) {
                            if *xv > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].data;
                    acc(*a, &mut |ga| {
                        for ((o, gv), xv) in ga.iter_mut().zip(&g).zip(x.iter()) {
                            *o += gv * sigmoid(*xv);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let (m, n) = node.dims2();
                    let y = &node.data;
                    acc(*a, &mut |ga| {
                        for r in 0..m {
                            let yr = &y[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                ga[r * n + c] += yr[c] * (gr[c] - s);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = node.dims2();
                    let gv = &nodes[*gain].data;
                    acc(*gain, &mut |gg| {
                        for r in 0..m {
                            for c in 0..n {
                                gg[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    });
                    acc(*bias, &mut |gb| {
                        for r in 0..m {
                            add_into(gb, &g[r * n..(r + 1) * n]);
                        }
                    });
                    acc(*x, &mut |gx| {
                        let mut dxhat = vec![0.0; n];
                        for r in 0..m {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..n {
                                let d = g[r * n + c] * gv[c];
                                dxhat[c] = d;
                                mean_d += d;
                                mean_dx += d * xhat[r * n + c];
                            }
                            mean_d /= n as f64;
                            mean_dx /= n as f64;
                            for c in 0..n {
                                gx[r * n + c] +=
                                    rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let (_, d) = nodes[*table].dims2();
                    acc(*table, &mut |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = node.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let (_, w) = nodes[p].dims2();
                        acc(p, &mut |gp| {
                            for r in 0..m {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + off..r * total + off + w],
                                );
                            }
                        });
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = nodes[p].data.len();
                        acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, w) = node.dims2();
                    let (_, n) = nodes[*x].dims2();
                    acc(*x, &mut |gx| {
                        for r in 0..m {
                            add_into(
                                &mut gx[r * n + start..r * n + start + w],
                                &g[r * w..(r + 1) * w],
                            );
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let (_, n) = node.dims2();
                    let off = start * n;
                    acc(*x, &mut |gx| add_into(&mut gx[off..off + g.len()], &g));
                }
                Op::Reshape(x) => {
                    acc(*x, &mut |gx| add_into(gx, &g));
                }
                Op::Sum(a) => {
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0]));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].data.len().max(1) as f64;
                    acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    if *count == 0 {
                        continue;
                    }
                    let (_, v) = nodes[*logits].dims2();
                    let scale = g[0] / *count as f64;
                    acc(*logits, &mut |gl| {
                        for (r, y) in targets.iter().enumerate() {
                            let Some(y) = *y else { continue };
                            for c in 0..v {
                                let ind = if c == y { 1.0 } else { 0.0 };
                                gl[r * v + c] += scale * (probs[r * v + c] - ind);
                            }
                        }
                    });
                }
                Op::GatherSum { x, groups } => {
                    let (_, n) = nodes[*x].dims2();
                    acc(*x, &mut |gx| {
                        for (p, grp) in groups.iter().enumerate() {
                            for &(r, w) in grp {
                                for (o, v) in gx[r * n..(r + 1) * n].iter_mut().zip(&g[p * n..(p + 1) * n]) {
                                    *o += w * v;
                                }
                            }
                        }
                    });
                }
                Op::CosineRows {
                    a,
                    b,
                    dots,
                    na,
                    nb,
                    denom,
                } => {
                    let (m, n) = nodes[*a].dims2();
                    let (xa, xb) = (&nodes[*a].data, &nodes[*b].data);
                    let side = |own: &[f64], other: &[f64], norms: &[f64], out: &mut [f64]| {
                        for r in 0..m {
                            let cos = dots[r] / denom[r];
                            let guarded = na[r] * nb[r] < denom[r];
                            for c in 0..n {
                                let i = r * n + c;
                                let mut d = other[i] / denom[r];
                                if !guarded && norms[r] > 0.0 {
                                    d -= cos * own[i] / (norms[r] * norms[r]);
                                }
                                out[i] += g[r] * d;
                            }
                        }
                    };
                    acc(*a, &mut |ga| side(xa, xb, na, ga));
                    acc(*b, &mut |gb| side(xb, xa, nb, gb));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (_, d) = node.dims2();
                    let dh = d / spec.heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qd, kd, vd) = (&nodes[*q].data, &nodes[*k].data, &nodes[*v].data);
                    let mut gq = vec![0.0; qd.len()];
                    let mut gk = vec![0.0; kd.len()];
                    let mut gv = vec![0.0; vd.len()];
                    let mut dp = Vec::new();
                    let bases = spec.segment_bases();
                    for (si, seg) in spec.segments.iter().enumerate() {
                        for h in 0..spec.heads {
                            let base = bases[si] + h * seg.q_len * seg.k_len;
                            let c0 = h * dh;
                            for i in 0..seg.q_len {
                                let p = &probs[base + i * seg.k_len..][..seg.k_len];
                                let qrow = (seg.q_start + i) * d + c0;
                                let go = &g[qrow..qrow + dh];
                                dp.clear();
                                let mut s = 0.0;
                                for j in 0..seg.k_len {
                                    let vrow = (seg.k_start + j) * d + c0;
                                    let x = if p[j] != 0.0 { super::dot(go, &vd[vrow..vrow + dh]) } else { 0.0 };
                                    s += p[j] * x;
                                    dp.push(x);
                                    if p[j] != 0.0 {
                                        for (a, b) in gv[vrow..vrow + dh].iter_mut().zip(go) {
                                            *a += p[j] * b;
                                        }
                                    }
                                }
                                for j in 0..seg.k_len {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - s) * scale;
                                    let krow = (seg.k_start + j) * d + c0;
                                    for c in 0..dh {
                                        gq[qrow + c] += ds * kd[krow + c];
                                        gk[krow + c] += ds * qd[qrow + c];
                                    }
                                }
                            }
                        }
                    }
                    acc(*q, &mut |b| add_into(b, &gq));
                    acc(*k, &mut |b| add_into(b, &gk));
                    acc(*v, &mut |b| add_into(b, &gv));
                }
                Op::Cosine {
                    a,
                    b,
                    dot,
                    na,
                    nb,
                    denom,
                    guarded,
                } => {
                    let cos = dot / denom;
                    let (xa, xb) = (&nodes[*a].data, &nodes[*b].data);
                    // d cos / d a = b / denom - cos * a / |a|^2 (unguarded)
                    let grad_of = |own: &[f64], other: &[f64], own_norm: f64, out: &mut [f64]| {
                        for ((o, u), w) in out.iter_mut().zip(own).zip(other) {
                            let mut d = w / denom;
                            if !guarded && own_norm > 0.0 {
                                d -= cos * u / (own_norm * own_norm);
                            }
                            *o += g[0] * d;
                        }
                    };
                    acc(*a, &mut |ga| grad_of(xa, xb, *na, ga));
                    acc(*b, &mut |gb| grad_of(xb, xa, *nb, gb));
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = g.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);

        let i3 = g
            .constant(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = leaf(&mut g, vec![3, 2], vec![0.5, -1.0, 2.0, 3.0, -4.0, 7.0]);
        let y = g.matmul(i3, b).unwrap();
        assert_eq!(g.data(y), g.data(b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = g.softmax(x).unwrap();
        for v in g.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let y = g.softmax(x).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
        assert!(g.data(y)[1].abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut g = Graph::new();
        let mut logits = vec![-30.0; 4 * 3];
        let targets = [2usize, 0, 1];
        for (r, &t) in targets.iter().enumerate() {
            logits[r * 4 + t] = 30.0;
        }
        let l = g.constant(vec![3, 4], logits).unwrap();
        let ce = g.cross_entropy(l, &targets, None).unwrap();
        assert!(g.scalar(ce) < 1e-9);

        let l = g.constant(vec![2, 4], vec![0.3; 8]).unwrap();
        let ce = g.cross_entropy(l, &[1, 3], None).unwrap();
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-12);

        let ce = g.cross_entropy(l, &[0, 0], Some(0)).unwrap();
        assert_eq!(g.scalar(ce), 0.0);

        assert!(matches!(
            g.cross_entropy(l, &[4, 0], None),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn embedding_scatter_adds_repeated_ids() {
        let mut g = Graph::new();
        let t = leaf(&mut g, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        assert_eq!(g.data(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum(e);
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(g.embedding(t, &[3]).is_err());
    }

    #[test]
    fn zero_norm_cosine_is_finite_and_flagged() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![3], vec![0.0; 3]);
        let b = leaf(&mut g, vec![3], vec![1.0, 0.0, 0.0]);
        let c = g.cosine(a, b, 1e-7).unwrap();
        assert!(g.scalar(c).is_finite());
        assert_eq!(g.flags().len(), 1);
        g.backward(c).unwrap();
        assert!(g.grad(a).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inference_graph_params_do_not_require_grad() {
        let mut store = ParamStore::new();
        let id = store.add_const("w", vec![2], 1.0);
        let mut g = Graph::inference();
        let w = g.param(&store, id);
        assert!(!g.requires_grad(w));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w, w2);
        assert!(g.requires_grad(w));
    }
}
