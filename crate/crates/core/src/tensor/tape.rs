//! Computation tape: records forward operations, replays them backward.
//!
//! Nodes are appended in execution order, so reverse node order is already a
//! reverse topological order. `backward` walks it once, pushing gradients
//! from each node into its inputs, then adds the result into the persistent
//! accumulator of every `requires_grad` leaf. Repeated `backward` calls
//! without [`Tape::zero_grads`] therefore accumulate.

use super::Tensor;
use crate::error::{Error, Result};

/// Rows with L2 norm below this are treated as zero for cosine similarity.
pub const MIN_COSINE_NORM: f64 = 1e-150;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Sum { a: usize },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    SliceRows { a: usize, start: usize, len: usize },
    ConcatRows { inputs: Vec<usize>, row_counts: Vec<usize> },
    ScaleRows { mat: usize, weights: usize },
    RowMax { a: usize, argmax: Vec<usize> },
    MeanRows { a: usize },
    Softmax { a: usize },
    SoftmaxRows { a: usize },
    Relu { a: usize },
    CosineMatrix { a: usize, b: usize, norms_a: Vec<f64>, norms_b: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient accumulator; leaves only.
    grad: Option<Tensor>,
}

/// Records differentiable operations over [`Tensor`] values.
///
/// Single-threaded by design: one tape per worker. Tensors off the tape are
/// plain immutable values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf tensor. Gradients accumulate on it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<TensorId> {
        if value.numel() == 0 {
            return Err(Error::Shape("tape leaf must be non-empty".into()));
        }
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Register a non-trainable value.
    pub fn constant(&mut self, value: Tensor) -> Result<TensorId> {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` before any
    /// backward pass or for non-leaf ids.
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Clear all leaf gradient accumulators.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn val(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn check_same_shape(&self, what: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.val(a).shape() == self.val(b).shape() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )))
        }
    }

    // ── Elementwise and scalar algebra ─────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x + y);
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(tensor(shape, data), Op::Add { a: a.0, b: b.0 }, false))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x - y);
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(tensor(shape, data), Op::Sub { a: a.0, b: b.0 }, false))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data = zip_map(self.val(a).data(), self.val(b).data(), |x, y| x * y);
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(tensor(shape, data), Op::Mul { a: a.0, b: b.0 }, false))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(Error::Numerical(format!("scale: non-finite factor {factor}")));
        }
        let data = self.val(a).data().iter().map(|x| x * factor).collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(tensor(shape, data), Op::Scale { a: a.0, factor }, false))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.val(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, false))
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    /// `[m×k] @ [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, k) = rank2("matmul lhs", ta)?;
        let (k2, n) = rank2("matmul rhs", tb)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} @ {:?})",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(tensor(vec![m, n], data), Op::Matmul { a: a.0, b: b.0 }, false))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.val(a);
        let (m, n) = rank2("transpose", ta)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        Ok(self.push(tensor(vec![n, m], data), Op::Transpose { a: a.0 }, false))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let ta = self.val(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                ta.shape(),
                shape
            )));
        }
        let data = ta.data().to_vec();
        Ok(self.push(tensor(shape, data), Op::Reshape { a: a.0 }, false))
    }

    /// Select rows of `table` by index; backward scatter-adds.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let t = self.val(table);
        let (rows, cols) = rank2("gather_rows", t)?;
        if indices.is_empty() {
            return Err(Error::Data("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            tensor(vec![indices.len(), cols], data),
            Op::GatherRows { table: table.0, indices: indices.to_vec() },
            false,
        ))
    }

    /// Contiguous row slice `[start, start+len)`.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let ta = self.val(a);
        let (rows, cols) = rank2("slice_rows", ta)?;
        if len == 0 || start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: [{start}, {start}+{len}) out of {rows} rows"
            )));
        }
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(
            tensor(vec![len, cols], data),
            Op::SliceRows { a: a.0, start, len },
            false,
        ))
    }

    /// Stack matrices with equal column counts, in order.
    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::Data("concat_rows: no inputs".into()));
        }
        let cols = rank2("concat_rows", self.val(inputs[0]))?.1;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let t = self.val(id);
            let (r, c) = rank2("concat_rows", t)?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            row_counts.push(r);
            data.extend_from_slice(t.data());
        }
        let total: usize = row_counts.iter().sum();
        Ok(self.push(
            tensor(vec![total, cols], data),
            Op::ConcatRows { inputs: inputs.iter().map(|i| i.0).collect(), row_counts },
            false,
        ))
    }

    /// Row `i` of the output is `weights[i] * mat[i, :]`.
    pub fn scale_rows(&mut self, mat: TensorId, weights: TensorId) -> Result<TensorId> {
        let (k, d) = rank2("scale_rows", self.val(mat))?;
        let w = self.val(weights);
        if w.shape() != [k] {
            return Err(Error::Shape(format!(
                "scale_rows: weights shape {:?}, expected [{k}]",
                w.shape()
            )));
        }
        let mut data = Vec::with_capacity(k * d);
        for i in 0..k {
            let wi = w.data()[i];
            data.extend(self.val(mat).row(i).iter().map(|x| x * wi));
        }
        Ok(self.push(
            tensor(vec![k, d], data),
            Op::ScaleRows { mat: mat.0, weights: weights.0 },
            false,
        ))
    }

    /// Per-row maximum of a matrix. The gradient routes to the first maximal
    /// element of each row (ties broken by lowest column index).
    pub fn row_max(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.val(a);
        let (m, n) = rank2("row_max", ta)?;
        let mut maxima = Vec::with_capacity(m);
        let mut argmax = Vec::with_capacity(m);
        for i in 0..m {
            let row = ta.row(i);
            let mut best = 0usize;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            maxima.push(row[best]);
            argmax.push(best);
        }
        Ok(self.push(Tensor::vector(maxima), Op::RowMax { a: a.0, argmax }, false))
    }

    /// Mean over rows: `[m×d] -> [d]`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.val(a);
        let (m, d) = rank2("mean_rows", ta)?;
        let mut out = vec![0.0; d];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(ta.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows { a: a.0 }, false))
    }

    /// Stable softmax of a rank-1 tensor.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.val(a);
        if ta.shape().len() != 1 {
            return Err(Error::Shape(format!(
                "softmax: expected vector, got shape {:?}",
                ta.shape()
            )));
        }
        ta.validate_finite("softmax input")?;
        let out = super::softmax(ta.data())?;
        Ok(self.push(Tensor::vector(out), Op::Softmax { a: a.0 }, false))
    }

    /// Row-wise stable softmax of a matrix.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = self.val(a);
        let (m, n) = rank2("softmax_rows", ta)?;
        ta.validate_finite("softmax_rows input")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(super::softmax(ta.row(i))?);
        }
        Ok(self.push(tensor(vec![m, n], data), Op::SoftmaxRows { a: a.0 }, false))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.val(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(tensor(shape, data), Op::Relu { a: a.0 }, false))
    }

    /// All-pairs cosine similarity between the rows of two matrices:
    /// `[p×d], [q×d] -> [p×q]`. Zero-norm rows are an explicit error.
    pub fn cosine_matrix(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (p, d) = rank2("cosine_matrix lhs", self.val(a))?;
        let (q, d2) = rank2("cosine_matrix rhs", self.val(b))?;
        if d != d2 {
            return Err(Error::Shape(format!(
                "cosine_matrix: row widths {d} vs {d2}"
            )));
        }
        let norms_a = row_norms(self.val(a), "cosine_matrix lhs")?;
        let norms_b = row_norms(self.val(b), "cosine_matrix rhs")?;
        let mut data = vec![0.0; p * q];
        for i in 0..p {
            let ra = self.val(a).row(i);
            for j in 0..q {
                let rb = self.val(b).row(j);
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                data[i * q + j] = dot / (norms_a[i] * norms_b[j]);
            }
        }
        Ok(self.push(
            tensor(vec![p, q], data),
            Op::CosineMatrix { a: a.0, b: b.0, norms_a, norms_b },
            false,
        ))
    }

    /// Cosine similarity of two equal-length vectors, as a scalar.
    pub fn cosine_sim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let la = vector_len("cosine_sim lhs", self.val(a))?;
        let lb = vector_len("cosine_sim rhs", self.val(b))?;
        if la != lb {
            return Err(Error::Shape(format!("cosine_sim: lengths {la} vs {lb}")));
        }
        let am = self.reshape(a, vec![1, la])?;
        let bm = self.reshape(b, vec![1, lb])?;
        let s = self.cosine_matrix(am, bm)?;
        self.reshape(s, vec![])
    }

    /// Mean over positions of `-log softmax(logits[p])[targets[p]]`.
    ///
    /// Computed via log-sum-exp with max subtraction; always non-negative.
    pub fn cross_entropy_logits(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let t = self.val(logits);
        let (positions, vocab) = rank2("cross_entropy_logits", t)?;
        if targets.len() != positions {
            return Err(Error::Shape(format!(
                "cross_entropy_logits: {} targets for {} positions",
                targets.len(),
                positions
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!(
                "cross_entropy_logits: target {bad} out of range for vocab {vocab}"
            )));
        }
        t.validate_finite("cross_entropy_logits input")?;
        let mut total = 0.0;
        for (p, &tgt) in targets.iter().enumerate() {
            let row = t.row(p);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
        }
        let loss = total / positions as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
            false,
        ))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients land in the accumulators
    /// of every `requires_grad` leaf; repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let loss_idx = loss.0;
        if !self.nodes[loss_idx].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss_idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss_idx + 1];
        grads[loss_idx] = Some(vec![1.0]);

        for idx in (0..=loss_idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // Leaves keep their gradient across backward calls.
            let node = &mut self.nodes[idx];
            if node.requires_grad {
                let acc = node.grad.get_or_insert_with(|| {
                    Tensor::zeros(node.value.shape().to_vec())
                });
                for (a, gi) in acc.data_mut().iter_mut().zip(&g) {
                    *a += gi;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], target: usize, numel: usize, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[target].get_or_insert_with(|| vec![0.0; numel]);
            f(slot);
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                for (&t, sign) in [(a, 1.0), (b, 1.0)].iter().map(|(t, s)| (*t, *s)) {
                    let n = self.nodes[t].value.numel();
                    add_into(grads, t, n, &mut |dst| {
                        for (d, gi) in dst.iter_mut().zip(g) {
                            *d += sign * gi;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                let n = self.nodes[*a].value.numel();
                add_into(grads, *a, n, &mut |dst| {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                add_into(grads, *b, n, &mut |dst| {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let n = va.numel();
                add_into(grads, *a, n, &mut |dst| {
                    for i in 0..n {
                        dst[i] += g[i] * vb.data()[i];
                    }
                });
                add_into(grads, *b, n, &mut |dst| {
                    for i in 0..n {
                        dst[i] += g[i] * va.data()[i];
                    }
                });
            }
            Op::Scale { a, factor } => {
                let n = self.nodes[*a].value.numel();
                add_into(grads, *a, n, &mut |dst| {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += factor * gi;
                    }
                });
            }
            Op::Sum { a } => {
                let n = self.nodes[*a].value.numel();
                add_into(grads, *a, n, &mut |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                add_into(grads, *a, m * k, &mut |dst| {
                    // dA = G @ B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb.data()[p * n + j];
                            }
                            dst[i * k + p] += s;
                        }
                    }
                });
                add_into(grads, *b, k * n, &mut |dst| {
                    // dB = A^T @ G
                    for p in 0..k {
                        for i in 0..m {
                            let aip = va.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                dst[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let va = &self.nodes[*a].value;
                let (m, n) = (va.rows(), va.cols());
                add_into(grads, *a, m * n, &mut |dst| {
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                let n = self.nodes[*a].value.numel();
                add_into(grads, *a, n, &mut |dst| {
                    for (d, gi) in dst.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::GatherRows { table, indices } => {
                let vt = &self.nodes[*table].value;
                let (rows, cols) = (vt.rows(), vt.cols());
                add_into(grads, *table, rows * cols, &mut |dst| {
                    for (pos, &row) in indices.iter().enumerate() {
                        for c in 0..cols {
                            dst[row * cols + c] += g[pos * cols + c];
                        }
                    }
                });
            }
            Op::SliceRows { a, start, len } => {
                let va = &self.nodes[*a].value;
                let cols = va.cols();
                add_into(grads, *a, va.numel(), &mut |dst| {
                    for r in 0..*len {
                        for c in 0..cols {
                            dst[(start + r) * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows { inputs, row_counts } => {
                let cols = self.nodes[inputs[0]].value.cols();
                let mut offset = 0usize;
                for (&inp, &rc) in inputs.iter().zip(row_counts) {
                    let n = rc * cols;
                    let seg = &g[offset * cols..offset * cols + n];
                    add_into(grads, inp, n, &mut |dst| {
                        for (d, gi) in dst.iter_mut().zip(seg) {
                            *d += gi;
                        }
                    });
                    offset += rc;
                }
            }
            Op::ScaleRows { mat, weights } => {
                let vm = &self.nodes[*mat].value;
                let vw = &self.nodes[*weights].value;
                let (k, d) = (vm.rows(), vm.cols());
                add_into(grads, *mat, k * d, &mut |dst| {
                    for i in 0..k {
                        let wi = vw.data()[i];
                        for c in 0..d {
                            dst[i * d + c] += g[i * d + c] * wi;
                        }
                    }
                });
                add_into(grads, *weights, k, &mut |dst| {
                    for i in 0..k {
                        let mut s = 0.0;
                        for c in 0..d {
                            s += g[i * d + c] * vm.data()[i * d + c];
                        }
                        dst[i] += s;
                    }
                });
            }
            Op::RowMax { a, argmax } => {
                let va = &self.nodes[*a].value;
                let n = va.cols();
                add_into(grads, *a, va.numel(), &mut |dst| {
                    for (i, &j) in argmax.iter().enumerate() {
                        dst[i * n + j] += g[i];
                    }
                });
            }
            Op::MeanRows { a } => {
                let va = &self.nodes[*a].value;
                let (m, d) = (va.rows(), va.cols());
                let inv = 1.0 / m as f64;
                add_into(grads, *a, m * d, &mut |dst| {
                    for i in 0..m {
                        for c in 0..d {
                            dst[i * d + c] += g[c] * inv;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = self.nodes[idx].value.data();
                let n = y.len();
                add_into(grads, *a, n, &mut |dst| {
                    let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for i in 0..n {
                        dst[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let out = &self.nodes[idx].value;
                let (m, n) = (out.rows(), out.cols());
                add_into(grads, *a, m * n, &mut |dst| {
                    for i in 0..m {
                        let y = out.row(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                        for j in 0..n {
                            dst[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Relu { a } => {
                let va = &self.nodes[*a].value;
                let n = va.numel();
                add_into(grads, *a, n, &mut |dst| {
                    for i in 0..n {
                        if va.data()[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                });
            }
            Op::CosineMatrix { a, b, norms_a, norms_b } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let s = self.nodes[idx].value.data();
                let (p, d) = (va.rows(), va.cols());
                let q = vb.rows();
                add_into(grads, *a, p * d, &mut |dst| {
                    for i in 0..p {
                        let ra = va.row(i);
                        let na = norms_a[i];
                        for j in 0..q {
                            let gij = g[i * q + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let rb = vb.row(j);
                            let sij = s[i * q + j];
                            let inv = 1.0 / (na * norms_b[j]);
                            for c in 0..d {
                                dst[i * d + c] += gij * (rb[c] * inv - sij * ra[c] / (na * na));
                            }
                        }
                    }
                });
                add_into(grads, *b, q * d, &mut |dst| {
                    for j in 0..q {
                        let rb = vb.row(j);
                        let nb = norms_b[j];
                        for i in 0..p {
                            let gij = g[i * q + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let ra = va.row(i);
                            let sij = s[i * q + j];
                            let inv = 1.0 / (norms_a[i] * nb);
                            for c in 0..d {
                                dst[j * d + c] += gij * (ra[c] * inv - sij * rb[c] / (nb * nb));
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = &self.nodes[*logits].value;
                let (p, v) = (vl.rows(), vl.cols());
                let scale = g[0] / p as f64;
                add_into(grads, *logits, p * v, &mut |dst| {
                    for (pos, &tgt) in targets.iter().enumerate() {
                        let row = vl.row(pos);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for x in row {
                            sum += (x - m).exp();
                        }
                        for j in 0..v {
                            let prob = (row[j] - m).exp() / sum;
                            let indicator = if j == tgt { 1.0 } else { 0.0 };
                            dst[pos * v + j] += scale * (prob - indicator);
                        }
                    }
                });
            }
        }
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op output shape consistent")
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn rank2(what: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() == 2 {
        Ok((t.shape()[0], t.shape()[1]))
    } else {
        Err(Error::Shape(format!(
            "{what}: expected matrix, got shape {:?}",
            t.shape()
        )))
    }
}

fn vector_len(what: &str, t: &Tensor) -> Result<usize> {
    if t.shape().len() == 1 && t.shape()[0] >= 1 {
        Ok(t.shape()[0])
    } else {
        Err(Error::Shape(format!(
            "{what}: expected non-empty vector, got shape {:?}",
            t.shape()
        )))
    }
}

fn row_norms(t: &Tensor, what: &str) -> Result<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < MIN_COSINE_NORM {
                Err(Error::Numerical(format!("{what}: zero-norm row {i}")))
            } else if !n.is_finite() {
                Err(Error::Numerical(format!("{what}: non-finite row {i}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_loss(tape: &Tape, id: TensorId) -> f64 {
        tape.value(id).item().unwrap()
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn square_function_gradient() {
        // f(x) = x^2 at x = 3: df/dx = 6.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        tape.backward(sq).unwrap();
        tape.backward(sq).unwrap();
        assert!((tape.grad(x).unwrap().data()[0] - 12.0).abs() < 1e-12);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_of_sum_equals_sum_of_backwards() {
        // Two independent subgraphs joined by add.
        let build = |tape: &mut Tape| {
            let x = tape.leaf(Tensor::vector(vec![1.5, -2.0]), true).unwrap();
            let y = tape.leaf(Tensor::vector(vec![0.5, 4.0]), true).unwrap();
            let xx = tape.mul(x, x).unwrap();
            let sy = tape.scale(y, 3.0).unwrap();
            let sx = tape.sum(xx).unwrap();
            let sy = tape.sum(sy).unwrap();
            (x, y, sx, sy)
        };
        let mut t1 = Tape::new();
        let (x1, y1, sx, sy) = build(&mut t1);
        let total = t1.add(sx, sy).unwrap();
        t1.backward(total).unwrap();

        let mut t2 = Tape::new();
        let (x2, y2, sx2, sy2) = build(&mut t2);
        t2.backward(sx2).unwrap();
        t2.backward(sy2).unwrap();

        assert_eq!(t1.grad(x1).unwrap().data(), t2.grad(x2).unwrap().data());
        assert_eq!(t1.grad(y1).unwrap().data(), t2.grad(y2).unwrap().data());
    }

    #[test]
    fn cosine_sim_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let c = tape.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
        let d = tape.constant(Tensor::vector(vec![5.0, 0.0])).unwrap();
        let s1 = tape.cosine_sim(a, b).unwrap();
        let s2 = tape.cosine_sim(a, c).unwrap();
        let s3 = tape.cosine_sim(a, d).unwrap();
        assert!((scalar_loss(&tape, s1) - 1.0).abs() < 1e-15);
        assert!(scalar_loss(&tape, s2).abs() < 1e-15);
        assert!((scalar_loss(&tape, s3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(tape.cosine_sim(a, b).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        // Uniform zero logits over vocab 4: loss = ln 4.
        let z = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap()).unwrap();
        let l = tape.cross_entropy_logits(z, &[2]).unwrap();
        assert!((scalar_loss(&tape, l) - 4.0_f64.ln()).abs() < 1e-12);

        // +20 on the target: loss ~ 0.
        let mut data = vec![0.0; 4];
        data[1] = 20.0;
        let z = tape.constant(Tensor::matrix(1, 4, data).unwrap()).unwrap();
        let l = tape.cross_entropy_logits(z, &[1]).unwrap();
        assert!(scalar_loss(&tape, l) < 1e-8);

        // Mean over positions: three rows of (0,0) with vocab 2 -> ln 2.
        let z = tape.constant(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap()).unwrap();
        let l = tape.cross_entropy_logits(z, &[0, 1, 0]).unwrap();
        assert!((scalar_loss(&tape, l) - 2.0_f64.ln()).abs() < 1e-12);

        // Out-of-range target.
        let z = tape.constant(Tensor::matrix(1, 2, vec![0.0; 2]).unwrap()).unwrap();
        assert!(tape.cross_entropy_logits(z, &[2]).is_err());
    }

    #[test]
    fn row_max_ties_take_lowest_index() {
        let mut tape = Tape::new();
        let m = tape
            .leaf(Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]).unwrap(), true)
            .unwrap();
        let r = tape.row_max(m).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_and_concat_shapes() {
        let mut tape = Tape::new();
        let table = tape
            .constant(Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap())
            .unwrap();
        let picked = tape.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(tape.value(picked).data(), &[4.0, 5.0, 0.0, 1.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());

        let top = tape.slice_rows(picked, 0, 1).unwrap();
        let both = tape.concat_rows(&[top, picked]).unwrap();
        assert_eq!(tape.value(both).shape(), &[3, 2]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let b = tape.constant(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58., 64., 139., 154.]);
        assert!(tape.matmul(a, a).is_err());
    }
}
