//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! The tape is rebuilt for every forward pass: each operation appends a node
//! holding its output value and enough bookkeeping to push gradients back to
//! its inputs. `backward` walks the nodes in reverse creation order, which is
//! always a valid reverse topological order.

use crate::error::{Error, Result};
use crate::tensor::{self, Broadcast, Tensor};

/// Handle to a tape node. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention mask shape for softmax rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SoftmaxMask {
    /// Every position may attend everywhere.
    Full,
    /// Row r may attend to columns 0..=r. Masked columns get probability
    /// exactly 0.0, so gradients through them are exactly zero.
    Causal,
}

impl SoftmaxMask {
    fn allowed_cols(&self, row: usize, cols: usize) -> usize {
        match self {
            SoftmaxMask::Full => cols,
            SoftmaxMask::Causal => (row + 1).min(cols),
        }
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var, SoftmaxMask),
    /// Normalize-only layer norm over the last axis; affine scale/shift is
    /// composed from `mul`/`add` with parameter vectors.
    LayerNorm(Var, f64),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SquaredError(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, op_name: &str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input: gradients are not tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: `backward` reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push("matmul", value, Op::Matmul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = tensor::broadcast_kind("add", self.shape(a), self.shape(b))?;
        let value = tensor::zip_broadcast("add", self.value(a), self.value(b), |x, y| x + y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push("add", value, Op::Add(a, b, kind), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = tensor::broadcast_kind("sub", self.shape(a), self.shape(b))?;
        let value = tensor::zip_broadcast("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push("sub", value, Op::Sub(a, b, kind), needs)
    }

    /// Elementwise (Hadamard) product, broadcasting a row vector or scalar rhs.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = tensor::broadcast_kind("mul", self.shape(a), self.shape(b))?;
        let value = tensor::zip_broadcast("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push("mul", value, Op::Mul(a, b, kind), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        let needs = self.needs_grad(a);
        self.push("scale", value, Op::Scale(a, c), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(tensor::gelu);
        let needs = self.needs_grad(a);
        self.push("gelu", value, Op::Gelu(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let needs = self.needs_grad(a);
        self.push("tanh", value, Op::Tanh(a), needs)
    }

    /// Row-wise softmax over the last axis of a matrix, with optional causal
    /// masking. Masked entries are exactly 0.0 in the output.
    pub fn softmax(&mut self, a: Var, mask: SoftmaxMask) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("softmax")?;
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let allowed = mask.allowed_cols(r, cols);
            let row = &x.data()[r * cols..r * cols + allowed];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * cols + j] = e;
                denom += e;
            }
            for v in &mut out[r * cols..r * cols + allowed] {
                *v /= denom;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs_grad(a);
        self.push("softmax", value, Op::Softmax(a, mask), needs)
    }

    /// Normalize rows to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("layer_norm")?;
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs_grad(a);
        self.push("layer_norm", value, Op::LayerNorm(a, eps), needs)
    }

    /// 1-D convolution over time with same-padding and stride 1.
    /// input `[T, c_in]`, kernel `[k, c_in, c_out]` (k odd), bias `[c_out]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (t, c_in) = self.value(input).dims2("conv1d")?;
        let kshape = self.shape(kernel).to_vec();
        let (k, kc_in, c_out) = match kshape.as_slice() {
            &[k, a, b] => (k, a, b),
            _ => {
                return Err(Error::Config(format!(
                    "conv1d: kernel must be rank-3 [k, c_in, c_out], got {kshape:?}"
                )))
            }
        };
        if kc_in != c_in || self.shape(bias) != [c_out] {
            return Err(Error::shape("conv1d", &[t, c_in], &kshape));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d: kernel width {k} must be odd")));
        }
        let half = k / 2;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; t * c_out];
        for ti in 0..t {
            let orow = &mut out[ti * c_out..(ti + 1) * c_out];
            orow.copy_from_slice(b);
            for dk in 0..k {
                let src = ti as isize + dk as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &x[src as usize * c_in..(src as usize + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t, c_out], out)?;
        let needs = self.needs_grad(input) || self.needs_grad(kernel) || self.needs_grad(bias);
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
            },
            needs,
        )
    }

    /// Row lookup: `table[indices[i], :]` stacked into `[n, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2("embedding")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Config(format!(
                "embedding: index {bad} out of range for table with {rows} rows"
            )));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let needs = self.needs_grad(table);
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Concatenate matrices along axis 0 (stack rows) or axis 1 (widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat: no inputs".into()));
        }
        if axis > 1 {
            return Err(Error::Config(format!("concat: axis {axis} unsupported")));
        }
        let first = self.value(parts[0]).dims2("concat")?;
        let mut rows = first.0;
        let mut cols = first.1;
        for &p in &parts[1..] {
            let (r, c) = self.value(p).dims2("concat")?;
            if axis == 0 {
                if c != cols {
                    return Err(Error::shape("concat", &[rows, cols], &[r, c]));
                }
                rows += r;
            } else {
                if r != rows {
                    return Err(Error::shape("concat", &[rows, cols], &[r, c]));
                }
                cols += c;
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
        } else {
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs_grad(a);
        self.push("reshape", value, Op::Reshape(a), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(a))?;
        let needs = self.needs_grad(a);
        self.push("transpose", value, Op::Transpose(a), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("slice_rows")?;
        if start + len > rows {
            return Err(Error::Config(format!(
                "slice_rows: rows {start}..{} out of range for {rows}",
                start + len
            )));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        let needs = self.needs_grad(a);
        self.push("slice_rows", value, Op::SliceRows { input: a, start }, needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("slice_cols")?;
        if start + len > cols {
            return Err(Error::Config(format!(
                "slice_cols: cols {start}..{} out of range for {cols}",
                start + len
            )));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let needs = self.needs_grad(a);
        self.push("slice_cols", value, Op::SliceCols { input: a, start }, needs)
    }

    /// Select rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Config(format!(
                "gather_rows: row {bad} out of range for {rows}"
            )));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(x.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let needs = self.needs_grad(a);
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Mean over rows: `[T, C] -> [C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("mean_rows")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; cols];
        for row in x.chunks_exact(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for v in &mut out {
            *v /= rows as f64;
        }
        let value = Tensor::new(vec![cols], out)?;
        let needs = self.needs_grad(a);
        self.push("mean_rows", value, Op::MeanRows(a), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let needs = self.needs_grad(a);
        self.push("sum_all", value, Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let value = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        let needs = self.needs_grad(a);
        self.push("mean_all", value, Op::MeanAll(a), needs)
    }

    /// Sum of squared differences, reduced to a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("squared_error", self.shape(a), self.shape(b)));
        }
        let sum = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(sum);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push("squared_error", value, Op::SquaredError(a, b), needs)
    }

    /// Reverse pass from a scalar output. Returns per-`Var` gradients for
    /// every node on a path from a trainable leaf to `out`.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Config(format!(
                "backward: output must be scalar, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        var: Var,
        contribution: Tensor,
    ) -> Result<()> {
        if !self.nodes[var.0].needs_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution)?,
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs_grad(*a) {
                    let da = tensor::matmul_nt(g, self.value(*b))?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs_grad(*b) {
                    let db = tensor::matmul_tn(self.value(*a), g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs_grad(*b) {
                    let db = tensor::reduce_to_broadcast(g, *kind, self.shape(*b));
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.needs_grad(*b) {
                    let mut db = tensor::reduce_to_broadcast(g, *kind, self.shape(*b));
                    db.scale_in_place(-1.0);
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Mul(a, b, kind) => {
                if self.needs_grad(*a) {
                    let da = tensor::zip_broadcast("mul_grad", g, self.value(*b), |gv, bv| gv * bv)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.needs_grad(*b) {
                    let ga =
                        tensor::zip_broadcast("mul_grad", g, self.value(*a), |gv, av| gv * av)?;
                    let db = tensor::reduce_to_broadcast(&ga, *kind, self.shape(*b));
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Scale(a, c) => {
                let da = g.map(|v| v * c);
                self.accumulate(grads, *a, da)?;
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * tensor::gelu_grad(xv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), data)?)?;
            }
            Op::Softmax(a, mask) => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = y.dims2("softmax_grad")?;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let allowed = mask.allowed_cols(r, cols);
                    let yrow = &y.data()[r * cols..r * cols + allowed];
                    let grow = &g.data()[r * cols..r * cols + allowed];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..allowed {
                        dx[r * cols + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![rows, cols], dx)?)?;
            }
            Op::LayerNorm(a, eps) => {
                let x = self.value(*a);
                let (rows, cols) = x.dims2("layer_norm_grad")?;
                let y = &self.nodes[idx].value;
                let n = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xrow = &x.data()[r * cols..(r + 1) * cols];
                    let yrow = &y.data()[r * cols..(r + 1) * cols];
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let mean = xrow.iter().sum::<f64>() / n;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = grow.iter().sum::<f64>() / n;
                    let gy_mean = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                    for j in 0..cols {
                        dx[r * cols + j] = inv * (grow[j] - g_mean - yrow[j] * gy_mean);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(vec![rows, cols], dx)?)?;
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let (t, c_in) = x.dims2("conv1d_grad")?;
                let kshape = w.shape();
                let (k, c_out) = (kshape[0], kshape[2]);
                let half = k / 2;
                if self.needs_grad(*input) {
                    let mut dx = vec![0.0; t * c_in];
                    for ti in 0..t {
                        let grow = &g.data()[ti * c_out..(ti + 1) * c_out];
                        for dk in 0..k {
                            let src = ti as isize + dk as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let dxrow =
                                &mut dx[src as usize * c_in..(src as usize + 1) * c_in];
                            for (ci, dxv) in dxrow.iter_mut().enumerate() {
                                let wrow = &w.data()
                                    [(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                                *dxv += grow.iter().zip(wrow).map(|(&gv, &wv)| gv * wv).sum::<f64>();
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(vec![t, c_in], dx)?)?;
                }
                if self.needs_grad(*kernel) {
                    let mut dw = vec![0.0; k * c_in * c_out];
                    for ti in 0..t {
                        let grow = &g.data()[ti * c_out..(ti + 1) * c_out];
                        for dk in 0..k {
                            let src = ti as isize + dk as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xrow = &x.data()[src as usize * c_in..(src as usize + 1) * c_in];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let dwrow = &mut dw
                                    [(dk * c_in + ci) * c_out..(dk * c_in + ci + 1) * c_out];
                                for (dwv, &gv) in dwrow.iter_mut().zip(grow) {
                                    *dwv += xv * gv;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *kernel, Tensor::new(vec![k, c_in, c_out], dw)?)?;
                }
                if self.needs_grad(*bias) {
                    let mut db = vec![0.0; c_out];
                    for grow in g.data().chunks_exact(c_out) {
                        for (dbv, &gv) in db.iter_mut().zip(grow) {
                            *dbv += gv;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![c_out], db)?)?;
                }
            }
            Op::Embedding { table, indices } => {
                if self.needs_grad(*table) {
                    let shape = self.shape(*table).to_vec();
                    let d = shape[1];
                    let mut dt = vec![0.0; shape[0] * d];
                    for (pos, &i) in indices.iter().enumerate() {
                        let grow = &g.data()[pos * d..(pos + 1) * d];
                        let trow = &mut dt[i * d..(i + 1) * d];
                        for (tv, &gv) in trow.iter_mut().zip(grow) {
                            *tv += gv;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(shape, dt)?)?;
                }
            }
            Op::Concat { parts, axis } => {
                let cols_out = self.nodes[idx].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2("concat_grad")?;
                    if self.needs_grad(p) {
                        let mut dp = Vec::with_capacity(pr * pc);
                        if *axis == 0 {
                            dp.extend_from_slice(
                                &g.data()[offset * cols_out..(offset + pr) * cols_out],
                            );
                        } else {
                            for r in 0..pr {
                                dp.extend_from_slice(
                                    &g.data()[r * cols_out + offset..r * cols_out + offset + pc],
                                );
                            }
                        }
                        self.accumulate(grads, p, Tensor::new(vec![pr, pc], dp)?)?;
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Reshape(a) => {
                let da = g.reshape(self.shape(*a).to_vec())?;
                self.accumulate(grads, *a, da)?;
            }
            Op::Transpose(a) => {
                let da = tensor::transpose(g)?;
                self.accumulate(grads, *a, da)?;
            }
            Op::SliceRows { input, start } => {
                if self.needs_grad(*input) {
                    let (rows, cols) = self.value(*input).dims2("slice_rows_grad")?;
                    let len = self.nodes[idx].value.shape()[0];
                    let mut dx = vec![0.0; rows * cols];
                    dx[start * cols..(start + len) * cols].copy_from_slice(g.data());
                    self.accumulate(grads, *input, Tensor::new(vec![rows, cols], dx)?)?;
                }
            }
            Op::SliceCols { input, start } => {
                if self.needs_grad(*input) {
                    let (rows, cols) = self.value(*input).dims2("slice_cols_grad")?;
                    let len = self.nodes[idx].value.shape()[1];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    self.accumulate(grads, *input, Tensor::new(vec![rows, cols], dx)?)?;
                }
            }
            Op::GatherRows { input, indices } => {
                if self.needs_grad(*input) {
                    let (rows, cols) = self.value(*input).dims2("gather_rows_grad")?;
                    let mut dx = vec![0.0; rows * cols];
                    for (pos, &i) in indices.iter().enumerate() {
                        let grow = &g.data()[pos * cols..(pos + 1) * cols];
                        let drow = &mut dx[i * cols..(i + 1) * cols];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(vec![rows, cols], dx)?)?;
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.value(*a).dims2("mean_rows_grad")?;
                let scale = 1.0 / rows as f64;
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(g.data().iter().map(|&gv| gv * scale));
                }
                self.accumulate(grads, *a, Tensor::new(vec![rows, cols], dx)?)?;
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len();
                self.accumulate(grads, *a, Tensor::new(shape, vec![gv; n])?)?;
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let gv = g.item() / n as f64;
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, vec![gv; n])?)?;
            }
            Op::SquaredError(a, b) => {
                let gv = g.item();
                let diff: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| 2.0 * gv * (x - y))
                    .collect();
                let shape = self.shape(*a).to_vec();
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, Tensor::new(shape.clone(), diff.clone())?)?;
                }
                if self.needs_grad(*b) {
                    let neg: Vec<f64> = diff.iter().map(|&v| -v).collect();
                    self.accumulate(grads, *b, Tensor::new(shape, neg)?)?;
                }
            }
        }
        Ok(())
    }
}
