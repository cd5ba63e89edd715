//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`Graph`] records ops in topological (creation) order. Every op checks
//! its input shapes, computes its value eagerly, and verifies the output is
//! finite; [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients only into subgraphs that require them. Graphs are independent —
//! many can be built and run concurrently against a shared read-only
//! parameter snapshot.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

pub type NodeId = usize;

/// Additive mask value that drives a softmax weight to exactly zero without
/// overflowing f32 sums.
pub const NEG_INF_MASK: f64 = -1.0e9;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    ScaleRows { x: NodeId, s: NodeId },
    ScaleConst { x: NodeId, c: S },
    Softmax { x: NodeId, axis: usize },
    CrossEntropy { logits: NodeId, target: usize, probs: Vec<S> },
    RmsNorm { x: NodeId, gain: NodeId, rstd: Vec<S> },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    Concat { axis: usize, parts: Vec<NodeId> },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    Narrow { x: NodeId, axis: usize, start: usize, len: usize },
    GatherRows { x: NodeId, ids: Vec<usize> },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    SumAxis { x: NodeId, axis: usize },
    GatedAbove { x: NodeId, threshold: S },
    Householder { rbase: NodeId, v: NodeId },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Gradient of the last `backward` root w.r.t. node `id`, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get(id).and_then(|g| {
            g.as_ref()
                .map(|v| Tensor::new(self.nodes[id].value.shape().to_vec(), v.clone()))
        })
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ── Node construction ────────────────────────────────────────────

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients (frozen parameters, inputs, masks).
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn req2(&self, a: NodeId, b: NodeId) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.nodes[a].value.dims2();
        let (kb, n) = self.nodes[b].value.dims2();
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.nodes[a].value.data(), self.nodes[b].value.data(), &mut out, m, ka, n);
        let req = self.req2(a, b);
        self.push(Tensor::matrix(m, n, out), Op::Matmul { a, b }, req, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn elementwise2(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: impl Fn(NodeId, NodeId) -> Op<S>,
    ) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<S> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let req = self.req2(a, b);
        self.push(Tensor::new(shape, out), op(a, b), req, name)
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2();
        if self.shape(bias) != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            });
        }
        let b = self.nodes[bias].value.data().to_vec();
        let mut out = self.nodes[x].value.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += b[j];
            }
        }
        let req = self.req2(x, bias);
        self.push(Tensor::matrix(m, n, out), Op::AddBias { x, bias }, req, "add_bias")
    }

    /// Scales row `i` of `x[m x n]` by `s[i]`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2();
        if self.shape(s) != [m] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                detail: format!("{:?} scaled by {:?}", self.shape(x), self.shape(s)),
            });
        }
        let sv = self.nodes[s].value.data().to_vec();
        let mut out = self.nodes[x].value.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= sv[i];
            }
        }
        let req = self.req2(x, s);
        self.push(Tensor::matrix(m, n, out), Op::ScaleRows { x, s }, req, "scale_rows")
    }

    pub fn scale_const(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let out: Vec<S> = self.nodes[x].value.data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::new(shape, out), Op::ScaleConst { x, c }, req, "scale_const")
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    /// 1-D tensors use axis 0; 2-D tensors support axis 0 (columns) or 1 (rows).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { op: "softmax", axis, rank });
        }
        if shape[axis] == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let data = self.nodes[x].value.data();
        let out = match (rank, axis) {
            (1, 0) => softmax_lane(data),
            (2, 1) => {
                let (m, n) = (shape[0], shape[1]);
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    out.extend(softmax_lane(&data[i * n..(i + 1) * n]));
                }
                out
            }
            (2, 0) => {
                let (m, n) = (shape[0], shape[1]);
                let mut out = vec![S::zero(); m * n];
                for j in 0..n {
                    let col: Vec<S> = (0..m).map(|i| data[i * n + j]).collect();
                    for (i, v) in softmax_lane(&col).into_iter().enumerate() {
                        out[i * n + j] = v;
                    }
                }
                out
            }
            _ => {
                return Err(Error::InvalidAxis { op: "softmax", axis, rank });
            }
        };
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::new(shape, out), Op::Softmax { x, axis }, req, "softmax")
    }

    /// `-log softmax(logits)[target]` for a 1-D logits vector.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("expected 1-D logits, got {:?}", shape),
            });
        }
        if target >= shape[0] {
            return Err(Error::UnknownToken { id: target, vocab: shape[0] });
        }
        let data = self.nodes[logits].value.data();
        let probs = softmax_lane(data);
        let p = probs[target].max(S::from_f64(f64::MIN_POSITIVE));
        let loss = -p.ln();
        let req = self.nodes[logits].requires_grad;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target, probs },
            req,
            "cross_entropy",
        )
    }

    /// Root-mean-square normalization over the last axis, scaled by `gain`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::contract("rms_norm on rank-0"))?;
        if self.shape(gain) != [n] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                detail: format!("{:?} with gain {:?}", shape, self.shape(gain)),
            });
        }
        let eps = S::from_f64(1e-6);
        let rows = self.nodes[x].value.numel() / n;
        let data = self.nodes[x].value.data();
        let g = self.nodes[gain].value.data();
        let mut out = vec![S::zero(); rows * n];
        let mut rstd = vec![S::zero(); rows];
        let inv_n = S::one() / S::from_f64(n as f64);
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            let ms = dot(row, row) * inv_n;
            let rs = S::one() / (ms + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                out[r * n + j] = row[j] * rs * g[j];
            }
        }
        let req = self.req2(x, gain);
        self.push(Tensor::new(shape, out), Op::RmsNorm { x, gain, rstd }, req, "rms_norm")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.nodes[x].value.data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::new(shape, out), Op::Gelu { x }, req, "gelu")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::new(shape, out), Op::Relu { x }, req, "relu")
    }

    /// Gathers rows of an embedding `table[v x d]` at token `ids`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.nodes[table].value.dims2();
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownToken { id, vocab: v });
            }
        }
        let data = self.nodes[table].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let req = self.nodes[table].requires_grad;
        self.push(
            Tensor::matrix(ids.len(), d, out),
            Op::Embedding { table, ids: ids.to_vec() },
            req,
            "embedding",
        )
    }

    /// Concatenates rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(Error::InvalidAxis { op: "concat", axis, rank: 2 });
        }
        let (m0, n0) = self.nodes[parts[0]].value.dims2();
        let (mut rows, mut cols) = (m0, n0);
        for &p in &parts[1..] {
            let (m, n) = self.nodes[p].value.dims2();
            match axis {
                0 if n == n0 => rows += m,
                1 if m == m0 => cols += n,
                _ => {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        detail: format!("{:?} vs {:?} on axis {}", (m0, n0), (m, n), axis),
                    });
                }
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        match axis {
            0 => {
                for &p in parts {
                    out.extend_from_slice(self.nodes[p].value.data());
                }
            }
            _ => {
                for i in 0..rows {
                    for &p in parts {
                        let n = self.nodes[p].value.dims2().1;
                        let d = self.nodes[p].value.data();
                        out.extend_from_slice(&d[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        let req = parts.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(
            Tensor::matrix(rows, cols, out),
            Op::Concat { axis, parts: parts.to_vec() },
            req,
            "concat",
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2();
        let data = self.nodes[x].value.data();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = data[i * n + j];
            }
        }
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::matrix(n, m, out), Op::Transpose { x }, req, "transpose")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x].value.reshaped(shape)?;
        let req = self.nodes[x].requires_grad;
        self.push(value, Op::Reshape { x }, req, "reshape")
    }

    /// Slices `len` indices starting at `start` along `axis` of a rank-2 tensor.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2();
        let bound = if axis == 0 { m } else { n };
        if axis > 1 {
            return Err(Error::InvalidAxis { op: "narrow", axis, rank: 2 });
        }
        if start + len > bound {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                detail: format!("[{start}..{}) of extent {bound}", start + len),
            });
        }
        let data = self.nodes[x].value.data();
        let value = if axis == 0 {
            Tensor::matrix(len, n, data[start * n..(start + len) * n].to_vec())
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&data[i * n + start..i * n + start + len]);
            }
            Tensor::matrix(m, len, out)
        };
        let req = self.nodes[x].requires_grad;
        self.push(value, Op::Narrow { x, axis, start, len }, req, "narrow")
    }

    /// Row `i` of the output is row `ids[i]` of `x`; rows may repeat.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2();
        for &id in ids {
            if id >= m {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("row {id} of {m}"),
                });
            }
        }
        let data = self.nodes[x].value.data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            out.extend_from_slice(&data[id * n..(id + 1) * n]);
        }
        let req = self.nodes[x].requires_grad;
        self.push(
            Tensor::matrix(ids.len(), n, out),
            Op::GatherRows { x, ids: ids.to_vec() },
            req,
            "gather_rows",
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::zero();
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::scalar(acc), Op::SumAll { x }, req, "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].value.numel();
        if n == 0 {
            return Err(Error::contract("mean_all of empty tensor"));
        }
        let mut acc = S::zero();
        for &v in self.nodes[x].value.data() {
            acc += v;
        }
        let req = self.nodes[x].requires_grad;
        self.push(
            Tensor::scalar(acc / S::from_f64(n as f64)),
            Op::MeanAll { x },
            req,
            "mean_all",
        )
    }

    /// Sums a rank-2 tensor along `axis`: axis 0 yields the column sums `[n]`,
    /// axis 1 the row sums `[m]`.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (m, n) = self.nodes[x].value.dims2();
        if axis > 1 {
            return Err(Error::InvalidAxis { op: "sum_axis", axis, rank: 2 });
        }
        let data = self.nodes[x].value.data();
        let out = if axis == 0 {
            let mut out = vec![S::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += data[i * n + j];
                }
            }
            out
        } else {
            let mut out = vec![S::zero(); m];
            for i in 0..m {
                for j in 0..n {
                    out[i] += data[i * n + j];
                }
            }
            out
        };
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::vector(out), Op::SumAxis { x, axis }, req, "sum_axis")
    }

    /// `y_i = x_i` where `x_i > threshold`, else 0. The gate is treated as a
    /// constant in backward (gradient passes only through open gates).
    pub fn gated_above(&mut self, x: NodeId, threshold: S) -> Result<NodeId> {
        let out: Vec<S> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| if v > threshold { v } else { S::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.nodes[x].requires_grad;
        self.push(Tensor::new(shape, out), Op::GatedAbove { x, threshold }, req, "gated_above")
    }

    /// `R = R' (I - 2 v v^T / v^T v)` without materializing the d x d
    /// reflection. `rbase` is `[r x d]`, `v` is `[d]`.
    pub fn householder(&mut self, rbase: NodeId, v: NodeId) -> Result<NodeId> {
        let (r, d) = self.nodes[rbase].value.dims2();
        if self.shape(v) != [d] {
            return Err(Error::ShapeMismatch {
                op: "householder",
                detail: format!("rbase {:?}, v {:?}", self.shape(rbase), self.shape(v)),
            });
        }
        let vv = self.nodes[v].value.data();
        let s = dot(vv, vv);
        let norm = s.sqrt().to_f64();
        if norm <= 1e-6 {
            return Err(Error::DegenerateVector { norm, eps: 1e-6 });
        }
        let rb = self.nodes[rbase].value.data();
        // a = R' v, then R = R' - (2/s) a v^T
        let coef = S::from_f64(2.0) / s;
        let mut out = rb.to_vec();
        for i in 0..r {
            let a_i = dot(&rb[i * d..(i + 1) * d], vv) * coef;
            for j in 0..d {
                out[i * d + j] -= a_i * vv[j];
            }
        }
        let req = self.req2(rbase, v);
        self.push(Tensor::matrix(r, d, out), Op::Householder { rbase, v }, req, "householder")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Clears any previous gradients first,
    /// so repeated calls are independent.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.zero_grads();
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.grads[root] = Some(vec![S::one()]);
        for id in (0..=root).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            self.step_back(id, &gout)?;
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: impl FnOnce(&mut [S])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let n = self.nodes[id].value.numel();
        let slot = self.grads[id].get_or_insert_with(|| vec![S::zero(); n]);
        delta(slot.as_mut_slice());
    }

    #[allow(clippy::too_many_lines)]
    fn step_back(&mut self, id: NodeId, gout: &[S]) -> Result<()> {
        // Borrow discipline: values are read through raw indexing before the
        // mutable grad update; ids always refer to earlier nodes.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a].value.dims2();
                let n = self.nodes[b].value.dims2().1;
                if self.nodes[a].requires_grad {
                    let bd = self.nodes[b].value.clone();
                    self.add_grad(a, |g| matmul_a_bt_acc(gout, bd.data(), g, m, n, k));
                }
                if self.nodes[b].requires_grad {
                    let ad = self.nodes[a].value.clone();
                    self.add_grad(b, |g| matmul_at_b_acc(ad.data(), gout, g, k, m, n));
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |g| axpy(g, gout, S::one()));
                self.add_grad(b, |g| axpy(g, gout, S::one()));
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |g| axpy(g, gout, S::one()));
                self.add_grad(b, |g| axpy(g, gout, -S::one()));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.clone();
                    self.add_grad(a, |g| {
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi += gout[i] * bv.data()[i];
                        }
                    });
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.clone();
                    self.add_grad(b, |g| {
                        for (i, gi) in g.iter_mut().enumerate() {
                            *gi += gout[i] * av.data()[i];
                        }
                    });
                }
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let (m, n) = self.nodes[x].value.dims2();
                self.add_grad(x, |g| axpy(g, gout, S::one()));
                self.add_grad(bias, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += gout[i * n + j];
                        }
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                let (m, n) = self.nodes[x].value.dims2();
                if self.nodes[x].requires_grad {
                    let sv = self.nodes[s].value.clone();
                    self.add_grad(x, |g| {
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] += gout[i * n + j] * sv.data()[i];
                            }
                        }
                    });
                }
                if self.nodes[s].requires_grad {
                    let xv = self.nodes[x].value.clone();
                    self.add_grad(s, |g| {
                        for i in 0..m {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc += gout[i * n + j] * xv.data()[i * n + j];
                            }
                            g[i] += acc;
                        }
                    });
                }
            }
            Op::ScaleConst { x, c } => {
                let (x, c) = (*x, *c);
                self.add_grad(x, |g| axpy(g, gout, c));
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = self.nodes[id].value.clone();
                let shape = y.shape().to_vec();
                self.add_grad(x, |g| match (shape.len(), axis) {
                    (1, 0) => softmax_lane_back(y.data(), gout, g, 1),
                    (2, 1) => {
                        let n = shape[1];
                        for i in 0..shape[0] {
                            let lo = i * n;
                            softmax_lane_back(&y.data()[lo..lo + n], &gout[lo..lo + n], &mut g[lo..lo + n], 1);
                        }
                    }
                    (2, 0) => {
                        let (m, n) = (shape[0], shape[1]);
                        for j in 0..n {
                            let col_y: Vec<S> = (0..m).map(|i| y.data()[i * n + j]).collect();
                            let col_g: Vec<S> = (0..m).map(|i| gout[i * n + j]).collect();
                            let mut col_out = vec![S::zero(); m];
                            softmax_lane_back(&col_y, &col_g, &mut col_out, 1);
                            for i in 0..m {
                                g[i * n + j] += col_out[i];
                            }
                        }
                    }
                    _ => unreachable!("validated at forward"),
                });
            }
            Op::CrossEntropy { logits, target, probs } => {
                let (logits, target) = (*logits, *target);
                let probs = probs.clone();
                let g0 = gout[0];
                self.add_grad(logits, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        let indicator = if i == target { S::one() } else { S::zero() };
                        *gi += g0 * (probs[i] - indicator);
                    }
                });
            }
            Op::RmsNorm { x, gain, rstd } => {
                let (x, gain) = (*x, *gain);
                let rstd = rstd.clone();
                let n = *self.nodes[x].value.shape().last().unwrap();
                let rows = self.nodes[x].value.numel() / n;
                let inv_n = S::one() / S::from_f64(n as f64);
                if self.nodes[x].requires_grad {
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gain].value.clone();
                    self.add_grad(x, |g| {
                        for r in 0..rows {
                            let xr = &xv.data()[r * n..(r + 1) * n];
                            let go = &gout[r * n..(r + 1) * n];
                            let rs = rstd[r];
                            // sum_i gout_i * gain_i * x_i
                            let mut proj = S::zero();
                            for i in 0..n {
                                proj += go[i] * gv.data()[i] * xr[i];
                            }
                            let k = proj * rs * rs * rs * inv_n;
                            for i in 0..n {
                                g[r * n + i] += go[i] * gv.data()[i] * rs - k * xr[i];
                            }
                        }
                    });
                }
                if self.nodes[gain].requires_grad {
                    let xv = self.nodes[x].value.clone();
                    self.add_grad(gain, |g| {
                        for r in 0..rows {
                            let rs = rstd[r];
                            for i in 0..n {
                                g[i] += gout[r * n + i] * xv.data()[r * n + i] * rs;
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                let xv = self.nodes[x].value.clone();
                self.add_grad(x, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        *gi += gout[i] * gelu_bwd(xv.data()[i]);
                    }
                });
            }
            Op::Relu { x } => {
                let x = *x;
                let xv = self.nodes[x].value.clone();
                self.add_grad(x, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        if xv.data()[i] > S::zero() {
                            *gi += gout[i];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].value.dims2().1;
                self.add_grad(table, |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += gout[row * d + j];
                        }
                    }
                });
            }
            Op::Concat { axis, parts } => {
                let axis = *axis;
                let parts = parts.clone();
                let total_cols = self.nodes[id].value.dims2().1;
                let mut offset = 0;
                for p in parts {
                    let (pm, pn) = self.nodes[p].value.dims2();
                    if axis == 0 {
                        let lo = offset;
                        self.add_grad(p, |g| axpy(g, &gout[lo..lo + pm * pn], S::one()));
                        offset += pm * pn;
                    } else {
                        let col0 = offset;
                        self.add_grad(p, |g| {
                            for i in 0..pm {
                                for j in 0..pn {
                                    g[i * pn + j] += gout[i * total_cols + col0 + j];
                                }
                            }
                        });
                        offset += pn;
                    }
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let (m, n) = self.nodes[x].value.dims2();
                self.add_grad(x, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                let x = *x;
                self.add_grad(x, |g| axpy(g, gout, S::one()));
            }
            Op::Narrow { x, axis, start, len } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                let (_, n) = self.nodes[x].value.dims2();
                let out_rows = self.nodes[id].value.dims2().0;
                self.add_grad(x, |g| {
                    if axis == 0 {
                        axpy(&mut g[start * n..(start + len) * n], gout, S::one());
                    } else {
                        for i in 0..out_rows {
                            for j in 0..len {
                                g[i * n + start + j] += gout[i * len + j];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, ids } => {
                let x = *x;
                let ids = ids.clone();
                let n = self.nodes[x].value.dims2().1;
                self.add_grad(x, |g| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            g[id * n + j] += gout[row * n + j];
                        }
                    }
                });
            }
            Op::SumAll { x } => {
                let x = *x;
                let g0 = gout[0];
                self.add_grad(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                });
            }
            Op::MeanAll { x } => {
                let x = *x;
                let n = self.nodes[x].value.numel();
                let g0 = gout[0] / S::from_f64(n as f64);
                self.add_grad(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                });
            }
            Op::SumAxis { x, axis } => {
                let (x, axis) = (*x, *axis);
                let (m, n) = self.nodes[x].value.dims2();
                self.add_grad(x, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += if axis == 0 { gout[j] } else { gout[i] };
                        }
                    }
                });
            }
            Op::GatedAbove { x, threshold } => {
                let (x, threshold) = (*x, *threshold);
                let xv = self.nodes[x].value.clone();
                self.add_grad(x, |g| {
                    for (i, gi) in g.iter_mut().enumerate() {
                        if xv.data()[i] > threshold {
                            *gi += gout[i];
                        }
                    }
                });
            }
            Op::Householder { rbase, v } => {
                let (rbase, v) = (*rbase, *v);
                let (r, d) = self.nodes[rbase].value.dims2();
                let rb = self.nodes[rbase].value.clone();
                let vv = self.nodes[v].value.clone();
                let s = dot(vv.data(), vv.data());
                let two_over_s = S::from_f64(2.0) / s;
                // w_i = sum_j gout_ij v_j  (Gv, length r)
                let mut w = vec![S::zero(); r];
                for i in 0..r {
                    w[i] = dot(&gout[i * d..(i + 1) * d], vv.data());
                }
                if self.nodes[rbase].requires_grad {
                    // grad_R' = G - (2/s) (G v) v^T = G H
                    let wv = w.clone();
                    let vvv = vv.clone();
                    self.add_grad(rbase, |g| {
                        for i in 0..r {
                            for j in 0..d {
                                g[i * d + j] += gout[i * d + j] - two_over_s * wv[i] * vvv.data()[j];
                            }
                        }
                    });
                }
                if self.nodes[v].requires_grad {
                    // a = R' v; t = a . (G v)
                    let mut a = vec![S::zero(); r];
                    for i in 0..r {
                        a[i] = dot(&rb.data()[i * d..(i + 1) * d], vv.data());
                    }
                    let t = dot(&a, &w);
                    let four_t_over_s2 = S::from_f64(4.0) * t / (s * s);
                    // grad_v = -(2/s)(R'^T G v + G^T a) + (4t/s^2) v
                    let mut gv = vec![S::zero(); d];
                    for i in 0..r {
                        let wi = w[i];
                        let ai = a[i];
                        for j in 0..d {
                            gv[j] += rb.data()[i * d + j] * wi + gout[i * d + j] * ai;
                        }
                    }
                    self.add_grad(v, |g| {
                        for j in 0..d {
                            g[j] += -two_over_s * gv[j] + four_t_over_s2 * vv.data()[j];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn axpy<S: Scalar>(y: &mut [S], x: &[S], a: S) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] += a * x[i];
    }
}

fn softmax_lane<S: Scalar>(x: &[S]) -> Vec<S> {
    let max = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = x.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = S::zero();
    for &v in &out {
        sum += v;
    }
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

/// `g_x = (g_y - <g_y, y>) .* y` accumulated into `gx`.
fn softmax_lane_back<S: Scalar>(y: &[S], gy: &[S], gx: &mut [S], _marker: usize) {
    let mut inner = S::zero();
    for i in 0..y.len() {
        inner += gy[i] * y[i];
    }
    for i in 0..y.len() {
        gx[i] += (gy[i] - inner) * y[i];
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity_is_noop() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(Tensor::eye(2));
        let a = g.constant(Tensor::matrix(2, 2, vec![3.0, -1.0, 2.5, 0.0]));
        let p = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(p).data(), g.value(a).data());
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]));
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn grad_of_sum_matmul_is_column_sums() {
        // d/dA sum(A B) has every row equal to the column sums of B^T rows,
        // i.e. entry (i,p) = sum_j B[p][j].
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.5]), true);
        let b = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.matmul(a, b).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(a).unwrap();
        assert_close(grad.data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0], 1e-12);
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-12);

        let x2 = g.constant(Tensor::vector(vec![2.0f64.ln(), 0.0, 0.0]));
        let y2 = g.softmax(x2, 0).unwrap();
        assert_close(g.value(y2).data(), &[0.5, 0.25, 0.25], 1e-12);
    }

    #[test]
    fn softmax_is_overflow_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data().to_vec();
        assert!((d[0] - 1.0).abs() < 1e-6);
        assert!(d[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![0], vec![]));
        assert!(g.softmax(x, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect()));
        let y = g.softmax(x, 1).unwrap();
        for i in 0..3 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]));
        let l = g.cross_entropy(x, 2).unwrap();
        assert!((g.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![50.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, 0).unwrap();
        assert!(g.value(l).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]));
        assert!(matches!(g.cross_entropy(x, 4), Err(Error::UnknownToken { .. })));
    }

    #[test]
    fn rms_norm_constant_vector_is_gain() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![3.0; 4]));
        let gain = g.constant(Tensor::vector(vec![2.0; 4]));
        let y = g.rms_norm(x, gain).unwrap();
        // rms of [3,3,3,3] is 3, so normalized row is all ones, times gain.
        assert_close(g.value(y).data(), &[2.0; 4], 1e-5);
    }

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::matrix(2, 3, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 5]);
        let a2 = g.narrow(c, 1, 0, 2).unwrap();
        let b2 = g.narrow(c, 1, 2, 3).unwrap();
        assert_eq!(g.value(a2).data(), g.value(a).data());
        assert_eq!(g.value(b2).data(), g.value(b).data());
    }

    #[test]
    fn nonfinite_output_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![f32::MAX, f32::MAX]));
        let y = g.mul(x, x); // overflows to +inf
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_linearity_of_adjoints() {
        // backward(a + b) == backward(a) + backward(b) on the same graph
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.5, -1.2, 2.0]), true);
        let sm = g.softmax(x, 0).unwrap();
        let s1 = g.sum_all(sm).unwrap();
        let gl = g.gelu(x).unwrap();
        let s2 = g.sum_all(gl).unwrap();

        g.backward(s1).unwrap();
        let g1 = g.grad(x).unwrap();
        g.backward(s2).unwrap();
        let g2 = g.grad(x).unwrap();

        let total = g.add(s1, s2).unwrap();
        g.backward(total).unwrap();
        let gt = g.grad(x).unwrap();
        for i in 0..3 {
            assert!((gt.data()[i] - (g1.data()[i] + g2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn householder_matches_explicit_matrix() {
        let mut g = Graph::<f64>::new();
        let rb = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let v = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let r = g.householder(rb, v).unwrap();
        // H flips the first coordinate; R' rows pick out e1, e2.
        assert_close(g.value(r).data(), &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 1e-12);
    }

    #[test]
    fn householder_degenerate_vector_errors() {
        let mut g = Graph::<f64>::new();
        let rb = g.constant(Tensor::eye(3));
        let v = g.constant(Tensor::vector(vec![0.0, 1e-9, 0.0]));
        assert!(matches!(g.householder(rb, v), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn fixed_inputs_give_bit_identical_reruns() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::vector(vec![0.3, -0.7, 1.9, 0.01]), true);
            let w = g.constant(Tensor::matrix(4, 4, (0..16).map(|i| (i as f32).sin()).collect()));
            let xm = g.reshape(x, vec![1, 4]).unwrap();
            let h = g.matmul(xm, w).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.reshape(h, vec![4]).unwrap();
            let l = g.cross_entropy(h, 1).unwrap();
            g.backward(l).unwrap();
            let bits: Vec<u32> = g
                .grad(x)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            (g.value(l).item().to_bits(), bits)
        };
        assert_eq!(run(), run());
    }
}
