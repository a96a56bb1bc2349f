//! Tape-based reverse-mode autodiff.
//!
//! A [`Tape`] owns every intermediate tensor of one forward pass. Ops append
//! nodes; node creation order is a topological order of the dataflow graph, so
//! [`Tape::backward`] is a single reverse sweep that visits each node exactly
//! once. Tapes are rebuilt per forward pass and confined to one thread; the
//! extracted values and gradients are plain [`Tensor`]s.

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, log_sum_exp, matmul_kernel, softmax_row_kernel, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// (m x k) * (k x n).
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    /// Elementwise sum of any number of same-shape nodes.
    AddN { xs: Vec<NodeId> },
    /// Matrix plus a vector broadcast across rows.
    AddRowBroadcast { x: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    /// Product with a one-element node; gradients flow into both factors.
    ScaleByScalar { x: NodeId, s: NodeId },
    Transpose { x: NodeId },
    SoftmaxRows { x: NodeId },
    Gelu { x: NodeId },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    /// Rows of `a` stacked above rows of `b`.
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    /// Matrices with equal row counts glued side by side.
    ConcatCols { xs: Vec<NodeId> },
    /// Sum of all elements, yielding a one-element node.
    Sum { x: NodeId },
    /// Cross entropy of one logit row against `label`, restricted to the
    /// half-open class range `[lo, hi)`; logits outside it are ignored as if
    /// set to negative infinity.
    CrossEntropyRow { logits: NodeId, label: usize, lo: usize, hi: usize },
    /// Shannon entropy (natural log) of softmax over one full logit row.
    EntropyRow { logits: NodeId },
    /// Cosine distance `1 - cos(a, b)` between two vectors.
    CosineDistance { a: NodeId, b: NodeId },
    /// Top-k magnitude binarization with a straight-through backward.
    WsnBinarize { scores: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records one forward pass and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a tensor; gradient tracking follows `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs = tensor.requires_grad;
        self.push(Op::Leaf, tensor, needs)
    }

    /// Registers a tensor that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.push(Op::Leaf, tensor, false)
    }

    /// Registers a tensor that always receives gradients.
    pub fn param(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = true;
        self.push(Op::Leaf, tensor, true)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Gradient buffer accumulated for `id`, if any was produced.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of `id` as a tensor, zeros when nothing reached it.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor {
        let shape = self.shape(id).to_vec();
        match &self.grads[id.0] {
            Some(g) => Tensor { shape, data: g.clone(), requires_grad: false },
            None => Tensor::zeros(&shape),
        }
    }

    // ── Ops ─────────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 {
            return Err(Error::contract("matmul: both operands must be 2-D"));
        }
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: vec![ta.cols()],
                got: vec![tb.rows()],
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_kernel(&ta.data, &tb.data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b, m, k, n }, Tensor { shape: vec![m, n], data, requires_grad: false }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, needs))
    }

    /// Elementwise sum of one or more same-shape nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("add_n: empty operand list"));
        }
        let mut value = self.value(xs[0]).clone();
        value.requires_grad = false;
        for &x in &xs[1..] {
            value = value.add(self.value(x))?;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::AddN { xs: xs.to_vec() }, value, needs))
    }

    /// `x + bias` with `bias` broadcast over the rows of `x`.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape.len() != 2 || tb.shape.len() != 1 || tb.shape[0] != tx.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                expected: tx.shape.clone(),
                got: tb.shape.clone(),
            });
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = tx.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRowBroadcast { x, bias }, Tensor { shape: vec![m, n], data, requires_grad: false }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul_elem(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, value, needs))
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scale(c);
        let needs = self.needs(x);
        self.push(Op::ScaleConst { x, c }, value, needs)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::contract("scale_by_scalar: scale must be a one-element node"));
        }
        let c = self.value(s).data[0];
        let value = self.value(x).scale(c);
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Op::ScaleByScalar { x, s }, value, needs))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose()?;
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose { x }, value, needs))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).softmax_rows()?;
        let needs = self.needs(x);
        Ok(self.push(Op::SoftmaxRows { x }, value, needs))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let tx = self.value(x);
        let data = tx.data.iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor { shape: tx.shape.clone(), data, requires_grad: false };
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, value, needs)
    }

    /// Row-wise layer normalization with learned scale and shift vectors.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = (tx.rows(), tx.cols());
        if tx.shape.len() != 2 || tg.shape != vec![n] || tb.shape != vec![n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                expected: vec![m, n],
                got: tg.shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let (mean, inv_std) = row_norm_stats(row, eps);
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * tg.data[j] + tb.data[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNormRows { x, gamma, beta, eps }, Tensor { shape: vec![m, n], data, requires_grad: false }, needs))
    }

    /// Stacks the rows of `a` on top of the rows of `b`.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                expected: ta.shape.clone(),
                got: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let value = Tensor { shape: vec![ta.rows() + tb.rows(), ta.cols()], data, requires_grad: false };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::ConcatRows { a, b }, value, needs))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if tx.shape.len() != 2 || start + len > m {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{} out of bounds for {m} rows",
                start + len
            )));
        }
        let data = tx.data[start * n..(start + len) * n].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start }, Tensor { shape: vec![len, n], data, requires_grad: false }, needs))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if tx.shape.len() != 2 || start + len > n {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{} out of bounds for {n} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor { shape: vec![m, len], data, requires_grad: false }, needs))
    }

    /// Glues matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::contract("concat_cols: empty operand list"));
        }
        let m = self.value(xs[0]).rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            if t.shape.len() != 2 || t.rows() != m {
                return Err(Error::contract("concat_cols: operands must be 2-D with equal row counts"));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &x in xs {
                let t = self.value(x);
                let n = t.cols();
                data.extend_from_slice(&t.data[i * n..(i + 1) * n]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::ConcatCols { xs: xs.to_vec() }, Tensor { shape: vec![m, total], data, requires_grad: false }, needs))
    }

    /// Sum of all elements as a one-element node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Tensor { shape: vec![1], data: vec![s], requires_grad: false }, needs)
    }

    /// Mean of one or more one-element nodes.
    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let total = self.add_n(xs)?;
        Ok(self.scale_const(total, 1.0 / xs.len() as f64))
    }

    /// Cross entropy of one logit row against `label`, with the softmax
    /// restricted to class range `[lo, hi)`. Returns a one-element node.
    pub fn cross_entropy_row(&mut self, logits: NodeId, label: usize, lo: usize, hi: usize) -> Result<NodeId> {
        let t = self.value(logits);
        let z = row_view(t, "cross_entropy_row")?;
        if lo >= hi || hi > z.len() {
            return Err(Error::contract(format!(
                "cross_entropy_row: class range {lo}..{hi} invalid for {} logits",
                z.len()
            )));
        }
        if label < lo || label >= hi {
            return Err(Error::contract(format!(
                "cross_entropy_row: label {label} outside class range {lo}..{hi}"
            )));
        }
        let lse = log_sum_exp(&z[lo..hi]);
        let loss = lse - z[label];
        let needs = self.needs(logits);
        Ok(self.push(Op::CrossEntropyRow { logits, label, lo, hi }, Tensor { shape: vec![1], data: vec![loss], requires_grad: false }, needs))
    }

    /// Shannon entropy (nats) of the softmax over one full logit row.
    pub fn entropy_row(&mut self, logits: NodeId) -> Result<NodeId> {
        let t = self.value(logits);
        let z = row_view(t, "entropy_row")?;
        let mut p = z.to_vec();
        softmax_row_kernel(&mut p);
        let h: f64 = p.iter().map(|&q| if q > 0.0 { -q * q.ln() } else { 0.0 }).sum();
        let needs = self.needs(logits);
        Ok(self.push(Op::EntropyRow { logits }, Tensor { shape: vec![1], data: vec![h], requires_grad: false }, needs))
    }

    /// Cosine distance `1 - cos(a, b)` between two vectors of equal length.
    /// A zero-norm operand makes the distance 1 with zero gradient (logged).
    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let va = row_view(ta, "cosine_distance")?;
        let vb = row_view(tb, "cosine_distance")?;
        if va.len() != vb.len() {
            return Err(Error::ShapeMismatch {
                op: "cosine_distance",
                expected: ta.shape.clone(),
                got: tb.shape.clone(),
            });
        }
        let na = norm(va);
        let nb = norm(vb);
        let value = if na == 0.0 || nb == 0.0 {
            log::warn!("cosine_distance: zero-norm operand, defining distance as 1");
            1.0
        } else {
            1.0 - dot(va, vb) / (na * nb)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::CosineDistance { a, b }, Tensor { shape: vec![1], data: vec![value], requires_grad: false }, needs))
    }

    /// Binary mask keeping the `keep` largest-magnitude scores, ones elsewhere
    /// zero. Ties are broken toward the lower flat index. The backward pass is
    /// straight-through: score gradients equal the mask gradients.
    pub fn wsn_binarize(&mut self, scores: NodeId, keep: usize) -> Result<NodeId> {
        let t = self.value(scores);
        if keep > t.numel() {
            return Err(Error::contract(format!(
                "wsn_binarize: keep {keep} exceeds {} elements",
                t.numel()
            )));
        }
        let value = binarize_top_k(t, keep);
        let needs = self.needs(scores);
        Ok(self.push(Op::WsnBinarize { scores }, value, needs))
    }

    // ── Backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a one-element `loss` node. Gradients accumulate into
    /// per-node buffers readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be a one-element node, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let upstream = self.grads[idx].take().unwrap();
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: impl FnOnce(&Tape) -> Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let add = contrib(self);
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (dst, src) in buf.iter_mut().zip(&add) {
                    *dst += src;
                }
            }
            None => self.grads[id.0] = Some(add),
        }
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        // The borrow checker cannot see that `contrib` closures only read
        // nodes created before `idx`, so values are cloned where needed.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                self.accumulate(a, |_| {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += up[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    da
                });
                self.accumulate(b, |_| {
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av_ip * up[i * n + j];
                            }
                        }
                    }
                    db
                });
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, |_| up.to_vec());
                self.accumulate(b, |_| up.to_vec());
            }
            Op::AddN { xs } => {
                for &x in &xs.clone() {
                    self.accumulate(x, |_| up.to_vec());
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                let (x, bias) = (*x, *bias);
                let n = self.nodes[bias.0].value.numel();
                let m = up.len() / n;
                self.accumulate(x, |_| up.to_vec());
                self.accumulate(bias, |_| {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += up[i * n + j];
                        }
                    }
                    db
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                self.accumulate(a, |_| up.iter().zip(&bv).map(|(u, v)| u * v).collect());
                self.accumulate(b, |_| up.iter().zip(&av).map(|(u, v)| u * v).collect());
            }
            Op::ScaleConst { x, c } => {
                let (x, c) = (*x, *c);
                self.accumulate(x, |_| up.iter().map(|u| u * c).collect());
            }
            Op::ScaleByScalar { x, s } => {
                let (x, s) = (*x, *s);
                let c = self.nodes[s.0].value.data[0];
                let xv = self.nodes[x.0].value.data.clone();
                self.accumulate(x, |_| up.iter().map(|u| u * c).collect());
                self.accumulate(s, |_| vec![up.iter().zip(&xv).map(|(u, v)| u * v).sum()]);
            }
            Op::Transpose { x } => {
                let x = *x;
                let out_shape = self.nodes[idx].value.shape.clone();
                let (n, m) = (out_shape[0], out_shape[1]);
                self.accumulate(x, |_| {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            dx[j * n + i] = up[i * m + j];
                        }
                    }
                    dx
                });
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let p = self.nodes[idx].value.data.clone();
                let n = self.nodes[idx].value.cols();
                let m = self.nodes[idx].value.rows();
                self.accumulate(x, |_| {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let pr = &p[i * n..(i + 1) * n];
                        let ur = &up[i * n..(i + 1) * n];
                        let dot: f64 = pr.iter().zip(ur).map(|(pv, uv)| pv * uv).sum();
                        for j in 0..n {
                            dx[i * n + j] = pr[j] * (ur[j] - dot);
                        }
                    }
                    dx
                });
            }
            Op::Gelu { x } => {
                let x = *x;
                let xv = self.nodes[x.0].value.data.clone();
                self.accumulate(x, |_| {
                    up.iter().zip(&xv).map(|(u, v)| u * gelu_grad_scalar(*v)).collect()
                });
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let xv = self.nodes[x.0].value.data.clone();
                let gv = self.nodes[gamma.0].value.data.clone();
                let n = self.nodes[gamma.0].value.numel();
                let m = xv.len() / n;
                // Normalized activations and per-row inverse stddevs, recomputed
                // exactly as in the forward pass.
                let mut xhat = vec![0.0; m * n];
                let mut inv_stds = vec![0.0; m];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let (mean, inv_std) = row_norm_stats(row, eps);
                    inv_stds[i] = inv_std;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv_std;
                    }
                }
                self.accumulate(x, |_| {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let ur = &up[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let g = gv[j] * ur[j];
                            m1 += g;
                            m2 += g * hr[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            let g = gv[j] * ur[j];
                            dx[i * n + j] = (g - m1 - hr[j] * m2) * inv_stds[i];
                        }
                    }
                    dx
                });
                self.accumulate(gamma, |_| {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += up[i * n + j] * xhat[i * n + j];
                        }
                    }
                    dg
                });
                self.accumulate(beta, |_| {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += up[i * n + j];
                        }
                    }
                    db
                });
            }
            Op::ConcatRows { a, b } => {
                let (a, b) = (*a, *b);
                let split = self.nodes[a.0].value.numel();
                self.accumulate(a, |_| up[..split].to_vec());
                self.accumulate(b, |_| up[split..].to_vec());
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let total = self.nodes[x.0].value.numel();
                let n = self.nodes[x.0].value.cols();
                self.accumulate(x, |_| {
                    let mut dx = vec![0.0; total];
                    dx[start * n..start * n + up.len()].copy_from_slice(up);
                    dx
                });
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let n = self.nodes[x.0].value.cols();
                let m = self.nodes[x.0].value.rows();
                self.accumulate(x, |_| {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] = up[i * len + j];
                        }
                    }
                    dx
                });
            }
            Op::ConcatCols { xs } => {
                let xs = xs.clone();
                let m = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &x in &xs {
                    let w = self.nodes[x.0].value.cols();
                    let off = offset;
                    self.accumulate(x, |_| {
                        let mut dx = vec![0.0; m * w];
                        for i in 0..m {
                            for j in 0..w {
                                dx[i * w + j] = up[i * total + off + j];
                            }
                        }
                        dx
                    });
                    offset += w;
                }
            }
            Op::Sum { x } => {
                let x = *x;
                let total = self.nodes[x.0].value.numel();
                self.accumulate(x, |_| vec![up[0]; total]);
            }
            Op::CrossEntropyRow { logits, label, lo, hi } => {
                let (logits, label, lo, hi) = (*logits, *label, *lo, *hi);
                let zv = self.nodes[logits.0].value.data.clone();
                self.accumulate(logits, |_| {
                    let mut p = zv[lo..hi].to_vec();
                    softmax_row_kernel(&mut p);
                    let mut dz = vec![0.0; zv.len()];
                    for (j, pj) in p.iter().enumerate() {
                        let cls = lo + j;
                        let indicator = if cls == label { 1.0 } else { 0.0 };
                        dz[cls] = up[0] * (pj - indicator);
                    }
                    dz
                });
            }
            Op::EntropyRow { logits } => {
                let logits = *logits;
                let zv = self.nodes[logits.0].value.data.clone();
                let h = self.nodes[idx].value.data[0];
                self.accumulate(logits, |_| {
                    let mut p = zv.clone();
                    softmax_row_kernel(&mut p);
                    p.iter().map(|&pj| {
                        if pj > 0.0 {
                            -up[0] * pj * (pj.ln() + h)
                        } else {
                            0.0
                        }
                    }).collect()
                });
            }
            Op::CosineDistance { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                let na = norm(&av);
                let nb = norm(&bv);
                if na == 0.0 || nb == 0.0 {
                    return;
                }
                let d = dot(&av, &bv);
                self.accumulate(a, |_| {
                    av.iter()
                        .zip(&bv)
                        .map(|(ai, bi)| -up[0] * (bi / (na * nb) - d * ai / (na * na * na * nb)))
                        .collect()
                });
                self.accumulate(b, |_| {
                    bv.iter()
                        .zip(&av)
                        .map(|(bi, ai)| -up[0] * (ai / (na * nb) - d * bi / (na * nb * nb * nb)))
                        .collect()
                });
            }
            Op::WsnBinarize { scores } => {
                let scores = *scores;
                self.accumulate(scores, |_| up.to_vec());
            }
        }
    }
}

/// Mean and inverse stddev of one row, shared by the forward and backward
/// layer-norm paths so their floats agree bit for bit.
fn row_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn row_view<'a>(t: &'a Tensor, op: &'static str) -> Result<&'a [f64]> {
    match t.shape.len() {
        1 => Ok(&t.data),
        2 if t.shape[0] == 1 => Ok(&t.data),
        _ => Err(Error::contract(format!("{op}: expected a vector or single-row matrix, got {:?}", t.shape))),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Ones at the `keep` largest-|score| positions, ties toward lower indices.
fn binarize_top_k(scores: &Tensor, keep: usize) -> Tensor {
    let mut order: Vec<usize> = (0..scores.numel()).collect();
    order.sort_by(|&i, &j| {
        scores.data[j]
            .abs()
            .partial_cmp(&scores.data[i].abs())
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut out = Tensor::zeros(&scores.shape);
    for &i in order.iter().take(keep) {
        out.data[i] = 1.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_elementwise_product_sum_gives_other_factor() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[3], vec![4.0, 5.0, 6.0]).unwrap());
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn backward_on_constant_loss_leaves_all_gradients_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[3]));
        let loss = tape.constant(Tensor::from_vec(&[1], vec![5.0]).unwrap());
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad_tensor(x).data, vec![0.0; 3]);
        let _ = loss;
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        // loss = sum(A * B); dA = 1 * B^T, dB = A^T * 1.
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.param(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn scale_by_scalar_routes_gradient_to_the_scalar() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = tape.param(Tensor::from_vec(&[1], vec![0.5]).unwrap());
        let y = tape.scale_by_scalar(x, s).unwrap();
        assert_eq!(tape.value(y).data, vec![1.5, 2.0]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[7.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_masked_logits_is_ln_k() {
        let mut tape = Tape::new();
        // Ten logits, active range of size 4 with equal values; the rest are
        // wildly different and must not matter.
        let mut z = vec![100.0; 10];
        for v in z[3..7].iter_mut() {
            *v = 0.25;
        }
        let logits = tape.param(Tensor::from_vec(&[10], z).unwrap());
        let loss = tape.cross_entropy_row(logits, 5, 3, 7).unwrap();
        assert!((tape.value(loss).data[0] - 4.0f64.ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&g[7..], &[0.0, 0.0, 0.0]);
        assert!((g[3] - 0.25).abs() < 1e-12);
        assert!((g[5] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_label_outside_range() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[6]));
        assert!(tape.cross_entropy_row(logits, 1, 2, 6).is_err());
    }

    #[test]
    fn entropy_of_uniform_logits_is_ln_n() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[8]));
        let h = tape.entropy_row(logits).unwrap();
        assert!((tape.value(h).data[0] - 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_of_parallel_opposite_and_orthogonal_vectors() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 2.0]).unwrap());
        let same = tape.constant(Tensor::from_vec(&[3], vec![2.0, 4.0, 4.0]).unwrap());
        let anti = tape.constant(Tensor::from_vec(&[3], vec![-1.0, -2.0, -2.0]).unwrap());
        let e1 = tape.constant(Tensor::from_vec(&[3], vec![1.0, 0.0, 0.0]).unwrap());
        let e2 = tape.constant(Tensor::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        let d_same = tape.cosine_distance(q, same).unwrap();
        let d_anti = tape.cosine_distance(q, anti).unwrap();
        let d_orth = tape.cosine_distance(e1, e2).unwrap();
        assert!(tape.value(d_same).data[0].abs() < 1e-12);
        assert!((tape.value(d_anti).data[0] - 2.0).abs() < 1e-12);
        assert!((tape.value(d_orth).data[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_with_zero_norm_is_one_with_zero_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(&[3]));
        let k = tape.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let d = tape.cosine_distance(z, k).unwrap();
        assert_eq!(tape.value(d).data[0], 1.0);
        tape.backward(d).unwrap();
        assert!(tape.grad(z).is_none());
        assert!(tape.grad(k).is_none());
    }

    #[test]
    fn wsn_binarize_keeps_exactly_k_breaking_ties_low() {
        let mut tape = Tape::new();
        let s = tape.param(Tensor::from_vec(&[5], vec![0.5, -0.5, 0.9, 0.5, 0.1]).unwrap());
        let b = tape.wsn_binarize(s, 3).unwrap();
        // |scores| = [0.5, 0.5, 0.9, 0.5, 0.1]; top-3 with low-index ties:
        // index 2 (0.9), then indices 0 and 1 (both 0.5, beating index 3).
        assert_eq!(tape.value(b).data, vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        let loss = tape.sum(b);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap());
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let glued = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(glued).data, tape.value(x).data);
        let doubled = tape.scale_const(right, 2.0);
        let top = tape.slice_rows(x, 0, 1).unwrap();
        let s1 = tape.sum(doubled);
        let s2 = tape.sum(top);
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 3.0, 3.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn identical_forward_passes_are_bit_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 2.0, 1.5, 0.7, -0.2]).unwrap());
            let w = tape.constant(Tensor::from_vec(&[3, 2], vec![0.3, 0.1, -0.5, 0.8, 0.2, -0.9]).unwrap());
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            let g = tape.gelu(s);
            tape.value(g).data.clone()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
