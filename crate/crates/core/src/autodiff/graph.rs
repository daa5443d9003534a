//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node whose inputs
//! are earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Values are immutable once
//! recorded. Leaves marked as parameters (`requires_grad`) receive gradients;
//! constants never do, and nodes that depend only on constants are skipped
//! entirely during the backward sweep.

use std::sync::Arc;

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
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
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var, cols: usize },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { x: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceCols { x: Var, start: usize, len: usize, cols: usize },
    GatherRows { x: Var, indices: Vec<usize>, cols: usize },
    MeanRows { x: Var, rows: usize, cols: usize },
    Cosine { a: Var, b: Var, m: usize, n: usize, k: usize, norm_a: Vec<f64>, norm_b: Vec<f64> },
    RowMin { x: Var, argmin: Vec<usize>, cols: usize },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. See the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    softmax_fault: Option<f64>,
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf sharing storage with the caller; no copy is made.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of `v`, if the backward sweep reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| {
            Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("gradient shape matches value")
        })
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Scales every gradient flowing back through softmax by `factor`.
    /// Only used to build a deliberately broken backward for negative-control
    /// gradient checks.
    #[doc(hidden)]
    pub fn set_softmax_backward_fault(&mut self, factor: Option<f64>) {
        self.softmax_fault = factor;
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{} · {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{} · {}ᵀ", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    /// `x · w + bias`, bias broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Adds a `[cols]` vector to every row of `x[rows, cols]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2()?;
        if self.value(bias).numel() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("bias {} for {}", shape_str(self.value(bias)), shape_str(self.value(x))),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { x, bias, cols }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v + c).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::AddScalar { x }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Gelu { x }, rg)
    }

    // ---- normalisation -------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} for shape {:?}", axis, shape),
            ));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(Error::shape("softmax", format!("empty axis {} in {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {} / beta {} for {}",
                    shape_str(self.value(gamma)),
                    shape_str(self.value(beta)),
                    shape_str(self.value(x))
                ),
            ));
        }
        if cols == 0 {
            return Err(Error::shape("layer_norm", "zero-width rows"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std },
            rg,
        ))
    }

    // ---- structural ----------------------------------------------------

    /// Stacks matrices along the row (token) axis. Zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts"));
        }
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {} vs {}", c, cols),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        let cols = t.cols();
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start, cols }, rg))
    }

    /// Concatenates matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no parts"));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("height {} vs {}", r, rows)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                data.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols { parts: widths, rows },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {}..{} of {}", start, start + len, shape_str(self.value(x))),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start, len, cols },
            rg,
        ))
    }

    /// Selects rows by index, in the given order.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(
                    "gather_rows",
                    format!("row {} of {}", i, shape_str(self.value(x))),
                ));
            }
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            Op::GatherRows { x, indices: indices.to_vec(), cols },
            rg,
        ))
    }

    /// Mean over rows, giving a `[1, cols]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, cols], out)?, Op::MeanRows { x, rows, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    // ---- similarity and reductions -------------------------------------

    /// Pairwise cosine similarity of the rows of `a[m,k]` and `b[n,k]`.
    /// Zero-norm rows are rejected rather than smoothed with an epsilon.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(
                "cosine_matrix",
                format!("{} vs {}", shape_str(self.value(a)), shape_str(self.value(b))),
            ));
        }
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let norm_a: Vec<f64> = (0..m).map(|i| kernels::norm(&va[i * k..(i + 1) * k])).collect();
        let norm_b: Vec<f64> = (0..n).map(|j| kernels::norm(&vb[j * k..(j + 1) * k])).collect();
        if let Some(i) = norm_a.iter().position(|&v| v == 0.0) {
            return Err(Error::degenerate("cosine", format!("left row {} has zero norm", i)));
        }
        if let Some(j) = norm_b.iter().position(|&v| v == 0.0) {
            return Err(Error::degenerate("cosine", format!("right row {} has zero norm", j)));
        }
        let mut out = kernels::matmul_nt(va, vb, m, k, n);
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (out[i * n + j] / (norm_a[i] * norm_b[j])).clamp(-1.0, 1.0);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::Cosine { a, b, m, n, k, norm_a, norm_b },
            rg,
        ))
    }

    /// Cosine similarity of two vectors of equal length, as a scalar node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.value(a).numel();
        let lb = self.value(b).numel();
        if la != lb {
            return Err(Error::shape("cosine_sim", format!("lengths {} vs {}", la, lb)));
        }
        let ra = self.reshape(a, &[1, la])?;
        let rb = self.reshape(b, &[1, lb])?;
        let c = self.cosine_matrix(ra, rb)?;
        self.reshape(c, &[])
    }

    /// Minimum of each row of `x[m,n]`. Ties resolve to the lowest column,
    /// which also receives the whole subgradient.
    pub fn row_min(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(Error::shape("row_min", "empty rows"));
        }
        let src = self.value(x).data();
        let mut argmin = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < row[best] {
                    best = j;
                }
            }
            argmin.push(best);
            out.push(row[best]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::RowMin { x, argmin, cols: n }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean { x }, rg))
    }

    /// Softmax cross-entropy of one logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        let c = v.numel();
        if v.rank() > 2 || (v.rank() == 2 && v.shape()[0] != 1) {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected one logit row, got {}", shape_str(v)),
            ));
        }
        if label >= c {
            return Err(Error::Config(format!("label {} out of range for {} classes", label, c)));
        }
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.data().iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let loss = sum.ln() + max - v.data()[label];
        let probs = exps.iter().map(|e| e / sum).collect();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Gradients accumulate
    /// additively into every parameter leaf the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {}", shape_str(self.value(loss))),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, idx: usize, gout: &[f64]) {
        // The op is temporarily moved out so its cached buffers can be read
        // while gradients are written.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let d = kernels::matmul_nt(gout, self.value(b).data(), m, n, k);
                    self.accumulate(a, d);
                }
                if self.rg(b) {
                    let d = kernels::matmul_tn(self.value(a).data(), gout, m, k, n);
                    self.accumulate(b, d);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.rg(a) {
                    let d = kernels::matmul(gout, self.value(b).data(), m, n, k);
                    self.accumulate(a, d);
                }
                if self.rg(b) {
                    let d = kernels::matmul_tn(gout, self.value(a).data(), m, n, k);
                    self.accumulate(b, d);
                }
            }
            &Op::Add { a, b } => {
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gout.to_vec());
            }
            &Op::Sub { a, b } => {
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gout.iter().map(|g| -g).collect());
            }
            &Op::Mul { a, b } => {
                if self.rg(a) {
                    let d = gout.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(a, d);
                }
                if self.rg(b) {
                    let d = gout.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(b, d);
                }
            }
            &Op::AddBias { x, bias, cols } => {
                self.accumulate(x, gout.to_vec());
                if self.rg(bias) {
                    let mut d = vec![0.0; cols];
                    for row in gout.chunks(cols.max(1)) {
                        for (a, g) in d.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    self.accumulate(bias, d);
                }
            }
            &Op::Scale { x, factor } => {
                self.accumulate(x, gout.iter().map(|g| g * factor).collect());
            }
            &Op::AddScalar { x } => self.accumulate(x, gout.to_vec()),
            &Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[idx].value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = 0.0;
                        for j in 0..len {
                            s += gout[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            d[p] = y[p] * (gout[p] - s);
                        }
                    }
                }
                if let Some(f) = self.softmax_fault {
                    d.iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(x, d);
            }
            Op::LayerNorm { x, gamma, beta, cols, xhat, inv_std } => {
                let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                let rows = inv_std.len();
                if self.rg(gamma) || self.rg(beta) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let g = gout[r * cols + c];
                            dg[c] += g * xhat[r * cols + c];
                            db[c] += g;
                        }
                    }
                    self.accumulate(gamma, dg);
                    self.accumulate(beta, db);
                }
                if self.rg(x) {
                    let gamma_v = self.value(gamma).data();
                    let n = cols as f64;
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gout[r * cols + c] * gamma_v[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        for c in 0..cols {
                            let dh = gout[r * cols + c] * gamma_v[c];
                            d[r * cols + c] = inv_std[r] / n
                                * (n * dh - sum_dh - xhat[r * cols + c] * sum_dh_h);
                        }
                    }
                    self.accumulate(x, d);
                }
            }
            &Op::Gelu { x } => {
                let d = gout
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                self.accumulate(x, d);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.rg(p) {
                        self.accumulate(p, gout[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            &Op::SliceRows { x, start, cols } => {
                if self.rg(x) {
                    let mut d = vec![0.0; self.value(x).numel()];
                    d[start * cols..start * cols + gout.len()].copy_from_slice(gout);
                    self.accumulate(x, d);
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..*rows {
                            d.extend_from_slice(&gout[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(p, d);
                    }
                    offset += c;
                }
            }
            &Op::SliceCols { x, start, len, cols } => {
                if self.rg(x) {
                    let rows = self.value(x).rows();
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gout[r * len..(r + 1) * len]);
                    }
                    self.accumulate(x, d);
                }
            }
            Op::GatherRows { x, indices, cols } => {
                let x = *x;
                if self.rg(x) {
                    let mut d = vec![0.0; self.value(x).numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..*cols {
                            d[i * cols + c] += gout[k * cols + c];
                        }
                    }
                    self.accumulate(x, d);
                }
            }
            &Op::MeanRows { x, rows, cols } => {
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend(gout.iter().map(|g| g / rows as f64));
                }
                self.accumulate(x, d);
            }
            Op::Cosine { a, b, m, n, k, norm_a, norm_b } => {
                let (a, b, m, n, k) = (*a, *b, *m, *n, *k);
                let c = self.nodes[idx].value.data();
                let va = self.value(a).data();
                let vb = self.value(b).data();
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = gout[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        let cij = c[i * n + j];
                        let inv = 1.0 / (norm_a[i] * norm_b[j]);
                        let ia2 = 1.0 / (norm_a[i] * norm_a[i]);
                        let ib2 = 1.0 / (norm_b[j] * norm_b[j]);
                        for t in 0..k {
                            let ai = va[i * k + t];
                            let bj = vb[j * k + t];
                            da[i * k + t] += g * (bj * inv - cij * ai * ia2);
                            db[j * k + t] += g * (ai * inv - cij * bj * ib2);
                        }
                    }
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::RowMin { x, argmin, cols } => {
                let x = *x;
                let mut d = vec![0.0; argmin.len() * cols];
                for (r, &j) in argmin.iter().enumerate() {
                    d[r * cols + j] = gout[r];
                }
                self.accumulate(x, d);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![gout[0]; n]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                self.accumulate(x, vec![gout[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, label, probs } => {
                let mut d: Vec<f64> = probs.iter().map(|p| p * gout[0]).collect();
                d[*label] -= gout[0];
                self.accumulate(*logits, d);
            }
            &Op::Reshape { x } => self.accumulate(x, gout.to_vec()),
        }
        self.nodes[idx].op = op;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::identity(2));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &Tensor::identity(2));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(mat(&[&[0.0], &[1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
        assert_eq!(g.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] · [2, 3]"), "{}", msg);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 2], (0..12).map(|i| (i as f64).sin() * 5.0).collect())
            .unwrap();
        let x = g.constant(t);
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| v[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 0]));
        assert!(g.softmax(x, 1).is_err());
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn cosine_identity_orthogonal_antipodal() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0, -3.0]));
        let na = g.constant(Tensor::vector(vec![-1.0, -2.0, 3.0]));
        let e1 = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let e2 = g.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        let s = g.cosine_sim(a, a).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-12);
        let s = g.cosine_sim(e1, e2).unwrap();
        assert!(g.value(s).item().abs() < 1e-12);
        let s = g.cosine_sim(a, na).unwrap();
        assert!((g.value(s).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let err = g.cosine_sim(a, b).unwrap_err();
        assert!(matches!(err, Error::Degenerate { .. }));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::identity(2));
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 3.0) * 1.7).collect();
        let x = g.constant(Tensor::new(vec![4, 10], data).unwrap());
        let gamma = g.constant(Tensor::filled(&[10], 1.0));
        let beta = g.constant(Tensor::zeros(&[10]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let v = g.value(y);
        for r in 0..4 {
            let row = v.row(r);
            let mean = row.iter().sum::<f64>() / 10.0;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn row_min_ties_take_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![0.5, 0.2, 0.2]]).unwrap());
        let m = g.row_min(x).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![5.0, 6.0]]).unwrap());
        let c = g.concat_rows(&[a, b]).unwrap();
        let a2 = g.slice_rows(c, 0, 2).unwrap();
        let b2 = g.slice_rows(c, 2, 1).unwrap();
        assert!(g.value(a2).bitwise_eq(g.value(a)));
        assert!(g.value(b2).bitwise_eq(g.value(b)));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(g.cross_entropy(l, 2), Err(Error::Config(_))));
        let ce = g.cross_entropy(l, 1).unwrap();
        let want = (1.0f64.exp() + 1.0).ln() - 1.0;
        assert!((g.value(ce).item() - want).abs() < 1e-14);
    }
}
