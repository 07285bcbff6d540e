//! Reverse-mode autodiff over an append-only operation tape.
//!
//! Every primitive validates input shapes, checks its output for numeric
//! faults, and records enough state for the backward pass. Nodes are stored
//! in application order, so the tape is topologically sorted by construction
//! and the backward pass is a single reverse sweep.

use std::rc::Rc;

use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Running mean/variance for a batch-norm parameter set.
///
/// `var` holds the unbiased estimate, matching the usual running-statistics
/// convention; normalisation itself uses the biased batch variance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    /// Momentum update towards freshly observed batch statistics.
    pub fn update(&mut self, batch: &BatchNormStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Elu(NodeId, f64),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Reshape(NodeId),
    GatherRows(NodeId, Rc<Vec<usize>>),
    SumSegments(NodeId, Rc<Vec<usize>>),
    SoftmaxSegments(NodeId, Rc<Vec<usize>>, usize),
    ScaleRows(NodeId, NodeId),
    L2Normalize { x: NodeId, norm: f64, passthrough: bool },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor, invstd: Vec<f64>, training: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by a backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a tracked node; errors when the node is detached from
    /// the differentiated output or was created without gradient tracking.
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor, AutodiffError> {
        self.get(id).ok_or(AutodiffError::DetachedNode(id.0))
    }
}

/// Single-threaded operation tape. Independent tapes may run in parallel;
/// one tape must not be shared across threads.
pub struct Tape {
    nodes: Vec<Node>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), strict: true }
    }

    /// Non-strict tapes let `l2_normalize` pass a zero vector through
    /// unchanged instead of reporting a numeric fault.
    pub fn lenient() -> Self {
        Self { nodes: Vec::new(), strict: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Leaf that participates in differentiation (parameter or input).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NumericFault { op: op_name });
        }
        Ok(self.push(value, op, needs_grad))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, details: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record("add", v, Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record("sub", v, Op::Sub(a, b), self.needs(&[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record("mul", v, Op::Mul(a, b), self.needs(&[a, b]))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), |t| t + c);
        self.record("add_scalar", v, Op::AddScalar(x), self.needs(&[x]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), |t| t * c);
        self.record("scale", v, Op::Scale(x, c), self.needs(&[x]))
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let v = matmul_values(ta, tb);
        self.record("matmul", v, Op::Matmul(a, b), self.needs(&[a, b]))
    }

    /// Concatenation: 1-D inputs chain end to end; 2-D inputs with equal row
    /// counts concatenate along columns.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch { op: "concat", details: "no inputs".into() });
        }
        let two_d = self.value(parts[0]).shape().len() == 2;
        let v = if two_d {
            let rows = self.value(parts[0]).rows();
            for &p in parts {
                if self.value(p).shape().len() != 2 || self.value(p).rows() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        details: format!("expected {rows} rows, got {:?}", self.value(p).shape()),
                    });
                }
            }
            let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut out = Tensor::zeros(vec![rows, total_cols]);
            let mut col = 0;
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                for r in 0..rows {
                    out.row_mut(r)[col..col + c].copy_from_slice(t.row(r));
                }
                col += c;
            }
            out
        } else {
            let mut vals = Vec::new();
            for &p in parts {
                if self.value(p).shape().len() != 1 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        details: format!("mixed ranks: {:?}", self.value(p).shape()),
                    });
                }
                vals.extend_from_slice(self.value(p).values());
            }
            Tensor::vector(vals)
        };
        let needs = self.needs(parts);
        self.record("concat", v, Op::Concat(parts.to_vec()), needs)
    }

    pub fn elu(&mut self, x: NodeId, alpha: f64) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), |t| if t > 0.0 { t } else { alpha * (t.exp() - 1.0) });
        self.record("elu", v, Op::Elu(x, alpha), self.needs(&[x]))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), f64::tanh);
        self.record("tanh", v, Op::Tanh(x), self.needs(&[x]))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), |t| if t >= 0.0 { t } else { slope * t });
        self.record("leaky_relu", v, Op::LeakyRelu(x, slope), self.needs(&[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.leaky_relu(x, 0.0)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), f64::exp);
        self.record("exp", v, Op::Exp(x), self.needs(&[x]))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), f64::ln);
        self.record("log", v, Op::Log(x), self.needs(&[x]))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = map(self.value(x), f64::sqrt);
        self.record("sqrt", v, Op::Sqrt(x), self.needs(&[x]))
    }

    /// Sum of all entries, returned as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let v = Tensor::scalar(self.value(x).values().iter().sum());
        self.record("sum", v, Op::Sum(x), self.needs(&[x]))
    }

    /// Dot product of two equally sized tensors, returned as a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.check_same_shape("dot", a, b)?;
        let v = Tensor::scalar(dot_slices(self.value(a).values(), self.value(b).values()));
        self.record("dot", v, Op::Dot(a, b), self.needs(&[a, b]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AutodiffError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {shape:?}", t.shape()),
            });
        }
        let v = Tensor::from_vec(shape, t.values().to_vec())?;
        self.record("reshape", v, Op::Reshape(x), self.needs(&[x]))
    }

    /// Row gather: `out[i] = x[indices[i]]`.
    pub fn gather_rows(&mut self, x: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId, AutodiffError> {
        let t = self.value(x);
        let rows = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                details: format!("index {bad} out of {rows} rows"),
            });
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(vec![indices.len(), cols]);
        for (r, &src) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(src));
        }
        let needs = self.needs(&[x]);
        self.record("gather_rows", out, Op::GatherRows(x, indices), needs)
    }

    /// Segment sum: `out[segments[e]] += x[e]` row-wise, `out` has
    /// `n_segments` rows.
    pub fn sum_segments(&mut self, x: NodeId, segments: Rc<Vec<usize>>, n_segments: usize) -> Result<NodeId, AutodiffError> {
        let t = self.value(x);
        if segments.len() != t.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum_segments",
                details: format!("{} segment ids for {} rows", segments.len(), t.rows()),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum_segments",
                details: format!("segment id {bad} out of {n_segments}"),
            });
        }
        let cols = t.cols();
        let mut out = Tensor::zeros(vec![n_segments, cols]);
        for (r, &seg) in segments.iter().enumerate() {
            let src = t.row(r);
            let dst = out.row_mut(seg);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let needs = self.needs(&[x]);
        self.record("sum_segments", out, Op::SumSegments(x, segments), needs)
    }

    /// Softmax of a 1-D score vector within each segment, with the usual
    /// max-shift for stability.
    pub fn softmax_over_segments(&mut self, scores: NodeId, segments: Rc<Vec<usize>>, n_segments: usize) -> Result<NodeId, AutodiffError> {
        let t = self.value(scores);
        if t.shape().len() != 1 || segments.len() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_over_segments",
                details: format!("scores {:?}, {} segment ids", t.shape(), segments.len()),
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_over_segments",
                details: format!("segment id {bad} out of {n_segments}"),
            });
        }
        let vals = t.values();
        let mut seg_max = vec![f64::NEG_INFINITY; n_segments];
        for (e, &s) in segments.iter().enumerate() {
            seg_max[s] = seg_max[s].max(vals[e]);
        }
        let mut exps: Vec<f64> = Vec::with_capacity(vals.len());
        let mut seg_sum = vec![0.0; n_segments];
        for (e, &s) in segments.iter().enumerate() {
            let ex = (vals[e] - seg_max[s]).exp();
            exps.push(ex);
            seg_sum[s] += ex;
        }
        for (e, &s) in segments.iter().enumerate() {
            exps[e] /= seg_sum[s];
        }
        let needs = self.needs(&[scores]);
        self.record(
            "softmax_over_segments",
            Tensor::vector(exps),
            Op::SoftmaxSegments(scores, segments, n_segments),
            needs,
        )
    }

    /// Row-wise scaling: `out[e] = w[e] * x[e]` for `x: [e,d]`, `w: [e]`.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, AutodiffError> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 1 || tw.len() != tx.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                details: format!("x {:?}, w {:?}", tx.shape(), tw.shape()),
            });
        }
        let mut out = Tensor::zeros(tx.shape().to_vec());
        for r in 0..tx.rows() {
            let c = tw.values()[r];
            for (o, v) in out.row_mut(r).iter_mut().zip(tx.row(r)) {
                *o = c * v;
            }
        }
        let needs = self.needs(&[x, w]);
        self.record("scale_rows", out, Op::ScaleRows(x, w), needs)
    }

    /// Normalises to unit Euclidean norm. A zero vector is a numeric fault on
    /// strict tapes and passes through unchanged on lenient ones.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let t = self.value(x);
        let norm = t.norm();
        if norm == 0.0 {
            if self.strict {
                return Err(AutodiffError::NumericFault { op: "l2_normalize" });
            }
            let v = t.clone();
            let needs = self.needs(&[x]);
            return self.record("l2_normalize", v, Op::L2Normalize { x, norm, passthrough: true }, needs);
        }
        let v = map(t, |e| e / norm);
        let needs = self.needs(&[x]);
        self.record("l2_normalize", v, Op::L2Normalize { x, norm, passthrough: false }, needs)
    }

    /// Batch normalisation over rows (axis 0) of `x: [n,d]`.
    ///
    /// Training mode normalises with batch statistics and returns them so
    /// the caller can fold them into its running estimates; inference mode
    /// normalises with the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: &BatchNormStats,
        training: bool,
        eps: f64,
    ) -> Result<(NodeId, Option<BatchNormStats>), AutodiffError> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                details: format!("expected matrix, got {:?}", t.shape()),
            });
        }
        let (n, d) = (t.rows(), t.cols());
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).len() != d {
                return Err(AutodiffError::ShapeMismatch {
                    op: "batch_norm",
                    details: format!("{name} has {} entries for {d} columns", self.value(id).len()),
                });
            }
        }
        if running.mean.len() != d || running.var.len() != d {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                details: format!("running stats sized {} for {d} columns", running.mean.len()),
            });
        }

        let (mean, var_biased) = if training {
            let mut mean = vec![0.0; d];
            for r in 0..n {
                for (m, v) in mean.iter_mut().zip(t.row(r)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            let mut var = vec![0.0; d];
            for r in 0..n {
                for (j, v) in t.row(r).iter().enumerate() {
                    let c = v - mean[j];
                    var[j] += c * c;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };

        let invstd: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(vec![n, d]);
        for r in 0..n {
            let src = t.row(r);
            let dst = xhat.row_mut(r);
            for j in 0..d {
                dst[j] = (src[j] - mean[j]) * invstd[j];
            }
        }
        let g = self.value(gamma).values().to_vec();
        let b = self.value(beta).values().to_vec();
        let mut out = Tensor::zeros(vec![n, d]);
        for r in 0..n {
            let src = xhat.row(r);
            let dst = out.row_mut(r);
            for j in 0..d {
                dst[j] = g[j] * src[j] + b[j];
            }
        }

        let batch_stats = if training {
            // Unbiased variance for the running estimate, as is conventional.
            let scale = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            Some(BatchNormStats {
                mean: mean.clone(),
                var: var_biased.iter().map(|v| v * scale).collect(),
            })
        } else {
            None
        };

        let needs = self.needs(&[x, gamma, beta]);
        let id = self.record(
            "batch_norm",
            out,
            Op::BatchNorm { x, gamma, beta, xhat, invstd, training },
            needs,
        )?;
        Ok((id, batch_stats))
    }

    /// Backward pass from a scalar output, seeded with 1.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, AutodiffError> {
        let v = self.value(output);
        if !v.is_scalar() {
            return Err(AutodiffError::NonScalarOutput(v.shape().to_vec()));
        }
        self.backward_seeded(output, &Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: backward from any node with an explicit
    /// cotangent of the same shape.
    pub fn backward_seeded(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, AutodiffError> {
        if output.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(output.0));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "backward",
                details: format!("seed {:?} vs output {:?}", seed.shape(), self.value(output).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].clone().unwrap();
            self.apply_vjp(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], id: NodeId) -> &'a mut [f64] {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(id).shape().to_vec()));
        }
        slot.as_mut().unwrap().values_mut()
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn apply_vjp(&self, i: usize, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let gv = g.values();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.wants(id) {
                        let buf = self.grad_buf(grads, id);
                        for (o, &gi) in buf.iter_mut().zip(gv) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let buf = self.grad_buf(grads, *a);
                    for (o, &gi) in buf.iter_mut().zip(gv) {
                        *o += gi;
                    }
                }
                if self.wants(*b) {
                    let buf = self.grad_buf(grads, *b);
                    for (o, &gi) in buf.iter_mut().zip(gv) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).values().to_vec();
                    let buf = self.grad_buf(grads, *a);
                    for ((o, &gi), bvi) in buf.iter_mut().zip(gv).zip(bv) {
                        *o += gi * bvi;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).values().to_vec();
                    let buf = self.grad_buf(grads, *b);
                    for ((o, &gi), avi) in buf.iter_mut().zip(gv).zip(av) {
                        *o += gi * avi;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.wants(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for (o, &gi) in buf.iter_mut().zip(gv) {
                        *o += gi;
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    let c = *c;
                    let buf = self.grad_buf(grads, *x);
                    for (o, &gi) in buf.iter_mut().zip(gv) {
                        *o += c * gi;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let gr = &gv[r * n..(r + 1) * n];
                        let dar = &mut da[r * k..(r + 1) * k];
                        for l in 0..k {
                            dar[l] = dot_slices(gr, tb.row(l));
                        }
                    }
                    let buf = self.grad_buf(grads, *a);
                    for (o, v) in buf.iter_mut().zip(da) {
                        *o += v;
                    }
                }
                if self.wants(*b) {
                    // dB = A^T . g
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let ar = ta.row(r);
                        let gr = &gv[r * n..(r + 1) * n];
                        for l in 0..k {
                            let av = ar[l];
                            let dbr = &mut db[l * n..(l + 1) * n];
                            for (o, &gi) in dbr.iter_mut().zip(gr) {
                                *o += av * gi;
                            }
                        }
                    }
                    let buf = self.grad_buf(grads, *b);
                    for (o, v) in buf.iter_mut().zip(db) {
                        *o += v;
                    }
                }
            }
            Op::Concat(parts) => {
                let two_d = self.value(parts[0]).shape().len() == 2;
                if two_d {
                    let rows = self.value(parts[0]).rows();
                    let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                    let mut col = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.wants(p) {
                            let buf = self.grad_buf(grads, p);
                            for r in 0..rows {
                                let grow = &gv[r * total_cols + col..r * total_cols + col + c];
                                for (o, &gi) in buf[r * c..(r + 1) * c].iter_mut().zip(grow) {
                                    *o += gi;
                                }
                            }
                        }
                        col += c;
                    }
                } else {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.wants(p) {
                            let buf = self.grad_buf(grads, p);
                            for (o, &gi) in buf.iter_mut().zip(&gv[off..off + len]) {
                                *o += gi;
                            }
                        }
                        off += len;
                    }
                }
            }
            Op::Elu(x, alpha) => {
                if self.wants(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let yv = self.nodes[i].value.values().to_vec();
                    let alpha = *alpha;
                    let buf = self.grad_buf(grads, *x);
                    for j in 0..buf.len() {
                        let d = if xv[j] > 0.0 { 1.0 } else { yv[j] + alpha };
                        buf[j] += gv[j] * d;
                    }
                }
            }
            Op::Tanh(x) => {
                if self.wants(*x) {
                    let yv = self.nodes[i].value.values().to_vec();
                    let buf = self.grad_buf(grads, *x);
                    for j in 0..buf.len() {
                        buf[j] += gv[j] * (1.0 - yv[j] * yv[j]);
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let slope = *slope;
                    let buf = self.grad_buf(grads, *x);
                    for j in 0..buf.len() {
                        buf[j] += gv[j] * if xv[j] >= 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let yv = self.nodes[i].value.values().to_vec();
                    let buf = self.grad_buf(grads, *x);
                    for j in 0..buf.len() {
                        buf[j] += gv[j] * yv[j];
                    }
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).values().to_vec();
                    let buf = self.grad_buf(grads, *x);
                    for j in 0..buf.len() {
                        buf[j] += gv[j] / xv[j];
                    }
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    let yv = self.nodes[i].value.values().to_vec();
                    let buf = self.grad_buf(grads, *x);
                    for j in 0..buf.len() {
                        // Clamped near zero so hinge losses stay finite at
                        // coincident embeddings.
                        buf[j] += gv[j] / (2.0 * yv[j].max(1e-12));
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let gs = gv[0];
                    let buf = self.grad_buf(grads, *x);
                    for o in buf.iter_mut() {
                        *o += gs;
                    }
                }
            }
            Op::Dot(a, b) => {
                let gs = gv[0];
                if self.wants(*a) {
                    let bv = self.value(*b).values().to_vec();
                    let buf = self.grad_buf(grads, *a);
                    for (o, bvi) in buf.iter_mut().zip(bv) {
                        *o += gs * bvi;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).values().to_vec();
                    let buf = self.grad_buf(grads, *b);
                    for (o, avi) in buf.iter_mut().zip(av) {
                        *o += gs * avi;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for (o, &gi) in buf.iter_mut().zip(gv) {
                        *o += gi;
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                if self.wants(*x) {
                    let cols = self.value(*x).cols();
                    let buf = self.grad_buf(grads, *x);
                    for (r, &src) in indices.iter().enumerate() {
                        let grow = &gv[r * cols..(r + 1) * cols];
                        for (o, &gi) in buf[src * cols..(src + 1) * cols].iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SumSegments(x, segments) => {
                if self.wants(*x) {
                    let cols = self.value(*x).cols();
                    let buf = self.grad_buf(grads, *x);
                    for (r, &seg) in segments.iter().enumerate() {
                        let grow = &gv[seg * cols..(seg + 1) * cols];
                        for (o, &gi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::SoftmaxSegments(x, segments, n_segments) => {
                if self.wants(*x) {
                    let yv = self.nodes[i].value.values().to_vec();
                    let mut seg_dot = vec![0.0; *n_segments];
                    for (e, &s) in segments.iter().enumerate() {
                        seg_dot[s] += gv[e] * yv[e];
                    }
                    let buf = self.grad_buf(grads, *x);
                    for (e, &s) in segments.iter().enumerate() {
                        buf[e] += yv[e] * (gv[e] - seg_dot[s]);
                    }
                }
            }
            Op::ScaleRows(x, w) => {
                let cols = self.value(*x).cols();
                if self.wants(*x) {
                    let wv = self.value(*w).values().to_vec();
                    let buf = self.grad_buf(grads, *x);
                    for (r, &c) in wv.iter().enumerate() {
                        let grow = &gv[r * cols..(r + 1) * cols];
                        for (o, &gi) in buf[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *o += c * gi;
                        }
                    }
                }
                if self.wants(*w) {
                    let xv = self.value(*x).values().to_vec();
                    let rows = self.value(*w).len();
                    let buf = self.grad_buf(grads, *w);
                    for r in 0..rows {
                        buf[r] += dot_slices(&gv[r * cols..(r + 1) * cols], &xv[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::L2Normalize { x, norm, passthrough } => {
                if self.wants(*x) {
                    if *passthrough {
                        let buf = self.grad_buf(grads, *x);
                        for (o, &gi) in buf.iter_mut().zip(gv) {
                            *o += gi;
                        }
                    } else {
                        let yv = self.nodes[i].value.values().to_vec();
                        let proj = dot_slices(gv, &yv);
                        let norm = *norm;
                        let buf = self.grad_buf(grads, *x);
                        for j in 0..buf.len() {
                            buf[j] += (gv[j] - yv[j] * proj) / norm;
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, training } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let gammav = self.value(*gamma).values().to_vec();
                if self.wants(*beta) {
                    let buf = self.grad_buf(grads, *beta);
                    for r in 0..n {
                        for (o, &gi) in buf.iter_mut().zip(&gv[r * d..(r + 1) * d]) {
                            *o += gi;
                        }
                    }
                }
                if self.wants(*gamma) {
                    let buf = self.grad_buf(grads, *gamma);
                    for r in 0..n {
                        let xr = xhat.row(r);
                        for j in 0..d {
                            buf[j] += gv[r * d + j] * xr[j];
                        }
                    }
                }
                if self.wants(*x) {
                    if *training {
                        // Standard batch-norm backward through the batch
                        // statistics, per column.
                        let mut sum_dxhat = vec![0.0; d];
                        let mut sum_dxhat_xhat = vec![0.0; d];
                        for r in 0..n {
                            let xr = xhat.row(r);
                            for j in 0..d {
                                let dxh = gv[r * d + j] * gammav[j];
                                sum_dxhat[j] += dxh;
                                sum_dxhat_xhat[j] += dxh * xr[j];
                            }
                        }
                        let nf = n as f64;
                        let buf = self.grad_buf(grads, *x);
                        for r in 0..n {
                            let xr = xhat.row(r);
                            for j in 0..d {
                                let dxh = gv[r * d + j] * gammav[j];
                                buf[r * d + j] +=
                                    invstd[j] / nf * (nf * dxh - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
                            }
                        }
                    } else {
                        // Inference normalisation is affine per column.
                        let buf = self.grad_buf(grads, *x);
                        for r in 0..n {
                            for j in 0..d {
                                buf[r * d + j] += gv[r * d + j] * gammav[j] * invstd[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let values = t.values().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(t.shape().to_vec(), values).expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), values).expect("shape preserved")
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (l, &av) in arow.iter().enumerate().take(k) {
            let brow = b.row(l);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_at_origin() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 1.0);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry_within_segment() {
        let mut tape = Tape::new();
        let s = tape.input(Tensor::vector(vec![2.0, 2.0]));
        let y = tape
            .softmax_over_segments(s, Rc::new(vec![0, 0]), 1)
            .unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarOutput(_))));
    }

    #[test]
    fn detached_leaf_errors() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0));
        let c = tape.constant(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.wrt(c).is_err());
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn numeric_fault_detected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(-1.0));
        assert!(matches!(tape.log(x), Err(AutodiffError::NumericFault { op: "log" })));
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert!((tape.value(y).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_zero_vector_policy() {
        let mut strict = Tape::new();
        let x = strict.input(Tensor::vector(vec![0.0, 0.0]));
        assert!(strict.l2_normalize(x).is_err());

        let mut lenient = Tape::lenient();
        let x = lenient.input(Tensor::vector(vec![0.0, 0.0]));
        let y = lenient.l2_normalize(x).unwrap();
        assert_eq!(lenient.value(y).values(), &[0.0, 0.0]);
    }

    #[test]
    fn replay_determinism() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::vector(vec![0.3, -0.7, 1.9]));
            let e = tape.elu(x, 1.0).unwrap();
            let t = tape.tanh(e).unwrap();
            let n = tape.l2_normalize(t).unwrap();
            tape.value(n).values().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical inputs must replay bit-identically");
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut tape = Tape::new();
        let s = tape.input(Tensor::vector(vec![0.1, 2.0, -1.0, 0.7, 0.7]));
        let segs = Rc::new(vec![0, 0, 1, 1, 1]);
        let y = tape.softmax_over_segments(s, segs.clone(), 2).unwrap();
        let v = tape.value(y).values();
        let mut sums = [0.0; 2];
        for (e, &seg) in segs.iter().enumerate() {
            assert!(v[e] >= 0.0);
            sums[seg] += v[e];
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_returns_stats() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(4, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap());
        let gamma = tape.input(Tensor::vector(vec![1.0, 1.0]));
        let beta = tape.input(Tensor::vector(vec![0.0, 0.0]));
        let running = BatchNormStats::identity(2);
        let (y, stats) = tape.batch_norm(x, gamma, beta, &running, true, 1e-5).unwrap();
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert!((stats.mean[1] - 25.0).abs() < 1e-12);
        // Output columns are standardised.
        let out = tape.value(y);
        let col_mean: f64 = (0..4).map(|r| out.row(r)[0]).sum::<f64>() / 4.0;
        assert!(col_mean.abs() < 1e-12);
    }
}
