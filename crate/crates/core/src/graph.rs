//! Reverse-mode gradient graph over dense `f64` tensors.
//!
//! Operations are recorded on a tape in forward order; [`GradGraph::backward`]
//! replays the tape in reverse, accumulating vector-Jacobian products into a
//! gradient slot per node. Node ids are assigned in creation order, so the
//! tape order is already topological and the reverse sweep visits each node
//! exactly once. Accumulation order is fixed by node id, which makes repeated
//! backward passes bit-identical.
//!
//! A graph and its tensors belong to one thread of execution; independent
//! graphs may run concurrently. `Var` handles are only meaningful for the
//! graph that created them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node within one gradient graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Edge handling for banded convolution over the first axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Rows outside the sequence contribute zero.
    ZeroPad,
    /// In-range kernel weights are rescaled to sum to one per row.
    Renormalize,
}

impl std::str::FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_pad" => Ok(Boundary::ZeroPad),
            "renormalize" => Ok(Boundary::Renormalize),
            other => Err(Error::Config(format!(
                "unknown boundary mode '{other}' (expected zero_pad or renormalize)"
            ))),
        }
    }
}

impl std::fmt::Display for Boundary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Boundary::ZeroPad => "zero_pad",
            Boundary::Renormalize => "renormalize",
        })
    }
}

#[derive(Clone, Debug)]
enum OpRecord {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    Scale { x: usize, factor: f64 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Sum { x: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    Reshape { x: usize },
    AddRow { m: usize, row: usize },
    Softmax { x: usize },
    Conv1dBand { h: usize, kernel: usize, boundary: Boundary },
    CrossEntropy { logits: usize, labels: Vec<usize> },
}

/// Wengert tape: one op record, value tensor, and gradient slot per node.
pub struct GradGraph {
    ops: Vec<OpRecord>,
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for GradGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph { ops: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: OpRecord, value: Tensor) -> Var {
        let id = self.ops.len();
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        Var(id)
    }

    /// Register an input or parameter tensor as a graph leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(OpRecord::Leaf, t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Accumulated gradient for `v`, if any reached it during backward.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Dimension(format!(
                "{what} needs matching shapes, got {:?} and {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul needs 2-D operands, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), m, k, n, &mut out);
        Ok(self.push(OpRecord::Matmul { a: a.0, b: b.0 }, Tensor::from_parts(vec![m, n], out)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x + y);
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(OpRecord::Add { a: a.0, b: b.0 }, Tensor::from_parts(shape, data)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x - y);
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(OpRecord::Sub { a: a.0, b: b.0 }, Tensor::from_parts(shape, data)))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "hadamard")?;
        let data = zip_map(self.values[a.0].data(), self.values[b.0].data(), |x, y| x * y);
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(OpRecord::Hadamard { a: a.0, b: b.0 }, Tensor::from_parts(shape, data)))
    }

    /// Elementwise affine map `factor * x + offset`.
    pub fn scale(&mut self, x: Var, factor: f64, offset: f64) -> Var {
        let data: Vec<f64> = self.values[x.0].data().iter().map(|v| factor * v + offset).collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(OpRecord::Scale { x: x.0, factor }, Tensor::from_parts(shape, data))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.values[x.0].data().iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(OpRecord::Sigmoid { x: x.0 }, Tensor::from_parts(shape, data))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.values[x.0].data().iter().map(|v| v.tanh()).collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(OpRecord::Tanh { x: x.0 }, Tensor::from_parts(shape, data))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.values[x.0].data().iter().sum();
        self.push(OpRecord::Sum { x: x.0 }, Tensor::scalar(total))
    }

    /// Stack 2-D blocks with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows needs at least one part".into()));
        }
        let cols = self.require_2d(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.require_2d(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows parts disagree on columns: {cols} vs {c}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.values[p.0].data());
        }
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(OpRecord::ConcatRows { parts }, Tensor::from_parts(vec![rows, cols], data)))
    }

    /// Stack 2-D blocks with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols needs at least one part".into()));
        }
        let rows = self.require_2d(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_2d(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols parts disagree on rows: {rows} vs {r}"
                )));
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.values[p.0].data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let parts = parts.iter().map(|v| v.0).collect();
        Ok(self.push(OpRecord::ConcatCols { parts }, Tensor::from_parts(vec![rows, cols], data)))
    }

    /// Contiguous row slice `[start, start+len)` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.require_2d(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of bounds for {rows} rows",
                start + len
            )));
        }
        let data = self.values[x.0].data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(OpRecord::SliceRows { x: x.0, start }, Tensor::from_parts(vec![len, cols], data)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.values[x.0].numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.values[x.0].shape()
            )));
        }
        let data = self.values[x.0].data().to_vec();
        Ok(self.push(OpRecord::Reshape { x: x.0 }, Tensor::from_parts(shape.to_vec(), data)))
    }

    /// Broadcast-add a `[1, c]` row vector to every row of an `[r, c]` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.require_2d(m, "add_row")?;
        let (rr, rc) = self.require_2d(row, "add_row")?;
        if rr != 1 || rc != cols {
            return Err(Error::Dimension(format!(
                "add_row expects a [1, {cols}] row, got [{rr}, {rc}]"
            )));
        }
        let mv = self.values[m.0].data();
        let rv = self.values[row.0].data();
        let mut data = Vec::with_capacity(mv.len());
        for r in 0..rows {
            for c in 0..cols {
                data.push(mv[r * cols + c] + rv[c]);
            }
        }
        Ok(self.push(OpRecord::AddRow { m: m.0, row: row.0 }, Tensor::from_parts(vec![rows, cols], data)))
    }

    /// Row-wise softmax with max-subtraction. 1-D input is treated as one row.
    /// Outputs are strictly positive and each row sums to one.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.values[x.0].shape().to_vec();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax needs a vector or matrix, got {shape:?}"
                )))
            }
        };
        let mut data = self.values[x.0].data().to_vec();
        for r in 0..rows {
            softmax_row(&mut data[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(OpRecord::Softmax { x: x.0 }, Tensor::from_parts(shape, data)))
    }

    /// Banded convolution of a `[T, E]` sequence with an odd-length kernel
    /// of already-normalized convex weights. Gradient flows to both inputs.
    pub fn conv1d_band(&mut self, h: Var, kernel: Var, boundary: Boundary) -> Result<Var> {
        let (t, e) = self.require_2d(h, "conv1d_band")?;
        let kshape = self.values[kernel.0].shape();
        if kshape.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv1d_band kernel must be 1-D, got {kshape:?}"
            )));
        }
        let klen = kshape[0];
        check_kernel_len(klen, t)?;
        let mut out = vec![0.0; t * e];
        conv_band_forward(
            self.values[h.0].data(),
            t,
            e,
            self.values[kernel.0].data(),
            boundary,
            &mut out,
        )?;
        Ok(self.push(
            OpRecord::Conv1dBand { h: h.0, kernel: kernel.0, boundary },
            Tensor::from_parts(vec![t, e], out),
        ))
    }

    /// Mean over rows of `-log softmax(logits[t])[labels[t]]`, fused through
    /// log-sum-exp for numerical stability.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (t, classes) = self.require_2d(logits, "cross_entropy")?;
        if labels.len() != t {
            return Err(Error::Validation(format!(
                "cross_entropy got {} labels for {t} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let lv = self.values[logits.0].data();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            total += log_sum_exp(row) - row[label];
        }
        let loss = total / t as f64;
        Ok(self.push(
            OpRecord::CrossEntropy { logits: logits.0, labels: labels.to_vec() },
            Tensor::scalar(loss),
        ))
    }

    fn require_2d(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.values[v.0].shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("{what} needs a 2-D tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Reverse sweep from a scalar loss. Clears previous gradients first, so
    /// repeated calls on the same graph produce bit-identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let GradGraph { ops, values, grads } = self;
        for g in grads.iter_mut() {
            *g = None;
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..ops.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &ops[id] {
                OpRecord::Leaf => {}
                OpRecord::Matmul { a, b } => {
                    let (m, k) = dims2(&values[*a]);
                    let n = values[*b].shape()[1];
                    let (av, bv) = (values[*a].data(), values[*b].data());
                    {
                        let da = grad_buf(grads, *a, m * k);
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    }
                    {
                        let db = grad_buf(grads, *b, k * n);
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] += acc;
                            }
                        }
                    }
                }
                OpRecord::Add { a, b } => {
                    accumulate(grads, *a, values[*a].numel(), &g, 1.0);
                    accumulate(grads, *b, values[*b].numel(), &g, 1.0);
                }
                OpRecord::Sub { a, b } => {
                    accumulate(grads, *a, values[*a].numel(), &g, 1.0);
                    accumulate(grads, *b, values[*b].numel(), &g, -1.0);
                }
                OpRecord::Hadamard { a, b } => {
                    let (av, bv) = (values[*a].data(), values[*b].data());
                    let da: Vec<f64> = zip_map(&g, bv, |x, y| x * y);
                    let db: Vec<f64> = zip_map(&g, av, |x, y| x * y);
                    accumulate(grads, *a, av.len(), &da, 1.0);
                    accumulate(grads, *b, bv.len(), &db, 1.0);
                }
                OpRecord::Scale { x, factor } => {
                    accumulate(grads, *x, values[*x].numel(), &g, *factor);
                }
                OpRecord::Sigmoid { x } => {
                    let y = values[id].data();
                    let dx: Vec<f64> = zip_map(&g, y, |gi, yi| gi * yi * (1.0 - yi));
                    accumulate(grads, *x, y.len(), &dx, 1.0);
                }
                OpRecord::Tanh { x } => {
                    let y = values[id].data();
                    let dx: Vec<f64> = zip_map(&g, y, |gi, yi| gi * (1.0 - yi * yi));
                    accumulate(grads, *x, y.len(), &dx, 1.0);
                }
                OpRecord::Sum { x } => {
                    let n = values[*x].numel();
                    let dx = grad_buf(grads, *x, n);
                    for v in dx.iter_mut() {
                        *v += g[0];
                    }
                }
                OpRecord::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = values[p].numel();
                        let dst = grad_buf(grads, p, n);
                        for (d, s) in dst.iter_mut().zip(&g[offset..offset + n]) {
                            *d += s;
                        }
                        offset += n;
                    }
                }
                OpRecord::ConcatCols { parts } => {
                    let rows = values[id].shape()[0];
                    let cols = values[id].shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let w = values[p].shape()[1];
                        let dst = grad_buf(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                dst[r * w + c] += g[r * cols + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                OpRecord::SliceRows { x, start } => {
                    let cols = values[*x].shape()[1];
                    let n = values[*x].numel();
                    let dst = grad_buf(grads, *x, n);
                    for (d, s) in dst[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                OpRecord::Reshape { x } => {
                    accumulate(grads, *x, values[*x].numel(), &g, 1.0);
                }
                OpRecord::AddRow { m, row } => {
                    let (rows, cols) = dims2(&values[*m]);
                    accumulate(grads, *m, rows * cols, &g, 1.0);
                    let dr = grad_buf(grads, *row, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dr[c] += g[r * cols + c];
                        }
                    }
                }
                OpRecord::Softmax { x } => {
                    let y = values[id].data();
                    let shape = values[id].shape();
                    let (rows, cols) =
                        if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(yi, gi)| yi * gi).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = ys[c] * (gs[c] - dot);
                        }
                    }
                    accumulate(grads, *x, y.len(), &dx, 1.0);
                }
                OpRecord::Conv1dBand { h, kernel, boundary } => {
                    let (t, e) = dims2(&values[*h]);
                    let w = values[*kernel].data();
                    let hv = values[*h].data();
                    let out = values[id].data();
                    let d = (w.len() - 1) / 2;
                    let mut dh = vec![0.0; t * e];
                    let mut dw = vec![0.0; w.len()];
                    for row in 0..t {
                        let lo = row.saturating_sub(d);
                        let hi = (row + d).min(t - 1);
                        let scale = match boundary {
                            Boundary::ZeroPad => 1.0,
                            Boundary::Renormalize => {
                                let s: f64 = (lo..=hi).map(|j| w[j + d - row]).sum();
                                1.0 / s
                            }
                        };
                        for j in lo..=hi {
                            let ki = j + d - row;
                            let wj = w[ki] * scale;
                            let mut kacc = 0.0;
                            for c in 0..e {
                                let gv = g[row * e + c];
                                dh[j * e + c] += gv * wj;
                                kacc += match boundary {
                                    Boundary::ZeroPad => gv * hv[j * e + c],
                                    // quotient rule: the row renormalizer also
                                    // depends on this kernel entry
                                    Boundary::Renormalize => {
                                        gv * (hv[j * e + c] - out[row * e + c]) * scale
                                    }
                                };
                            }
                            dw[ki] += kacc;
                        }
                    }
                    accumulate(grads, *h, t * e, &dh, 1.0);
                    accumulate(grads, *kernel, w.len(), &dw, 1.0);
                }
                OpRecord::CrossEntropy { logits, labels } => {
                    let (t, classes) = dims2(&values[*logits]);
                    let lv = values[*logits].data();
                    let gv = g[0] / t as f64;
                    let mut dl = vec![0.0; t * classes];
                    for (r, &label) in labels.iter().enumerate() {
                        let row = &lv[r * classes..(r + 1) * classes];
                        let lse = log_sum_exp(row);
                        for c in 0..classes {
                            let p = (row[c] - lse).exp();
                            let delta = if c == label { 1.0 } else { 0.0 };
                            dl[r * classes + c] = gv * (p - delta);
                        }
                    }
                    accumulate(grads, *logits, t * classes, &dl, 1.0);
                }
            }
            grads[id] = Some(g);
        }
        Ok(())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], id: usize, numel: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; numel])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, numel: usize, from: &[f64], factor: f64) {
    let dst = grad_buf(grads, id, numel);
    for (d, s) in dst.iter_mut().zip(from) {
        *d += factor * s;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of one row, with max-subtraction.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn check_kernel_len(klen: usize, t: usize) -> Result<()> {
    if klen % 2 == 0 {
        return Err(Error::Dimension(format!("kernel length must be odd, got {klen}")));
    }
    if klen > 2 * t - 1 {
        return Err(Error::Dimension(format!(
            "kernel of length {klen} exceeds the 2T-1 = {} limit for T = {t}",
            2 * t - 1
        )));
    }
    Ok(())
}

/// Shared forward kernel for the banded convolution; also used by the
/// plain (non-graph) path in `nn` and by the benchmark.
pub(crate) fn conv_band_forward(
    h: &[f64],
    t: usize,
    e: usize,
    w: &[f64],
    boundary: Boundary,
    out: &mut [f64],
) -> Result<()> {
    let d = (w.len() - 1) / 2;
    for row in 0..t {
        let lo = row.saturating_sub(d);
        let hi = (row + d).min(t - 1);
        match boundary {
            Boundary::ZeroPad => {
                for j in lo..=hi {
                    let wj = w[j + d - row];
                    let src = &h[j * e..(j + 1) * e];
                    let dst = &mut out[row * e..(row + 1) * e];
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o += wj * x;
                    }
                }
            }
            Boundary::Renormalize => {
                let s: f64 = (lo..=hi).map(|j| w[j + d - row]).sum();
                if s == 0.0 {
                    return Err(Error::Validation(format!(
                        "cannot renormalize row {row}: in-range kernel weights sum to zero"
                    )));
                }
                for j in lo..=hi {
                    let wj = w[j + d - row] / s;
                    let src = &h[j * e..(j + 1) * e];
                    let dst = &mut out[row * e..(row + 1) * e];
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o += wj * x;
                    }
                }
            }
        }
    }
    Ok(())
}
