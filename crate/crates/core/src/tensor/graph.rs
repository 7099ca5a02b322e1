use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeometry, View, ViewMut};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv1d { signal: Var, kernel: Var, geom: ConvGeometry },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Abs(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    GatherRows(Var, Vec<usize>),
    RowNorms(Var),
    Sum(Var),
    Mean(Var),
    Mask(Var, Vec<f64>),
    Bce { scores: Var, target: f64, lo: f64, hi: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed operations. Nodes are stored in
/// execution order, so inputs always precede the nodes that consume them.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = dst.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Hash of every piecewise branch taken so far: ReLU and abs input signs,
    /// gathered row indices, masks and BCE clamp activity. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    self.value(*a).data().iter().for_each(|&v| (v > 0.0).hash(&mut h));
                }
                Op::Abs(a) => {
                    i.hash(&mut h);
                    self.value(*a).data().iter().for_each(|&v| (v >= 0.0).hash(&mut h));
                }
                Op::GatherRows(_, idx) => {
                    i.hash(&mut h);
                    idx.hash(&mut h);
                }
                Op::Mask(_, m) => {
                    i.hash(&mut h);
                    m.iter().for_each(|v| v.to_bits().hash(&mut h));
                }
                Op::Bce { scores, lo, hi, .. } => {
                    i.hash(&mut h);
                    self.value(*scores).data().iter().for_each(|&v| (v < *lo, v > *hi).hash(&mut h));
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Records a leaf. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf")?;
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Non-differentiable input (features, constants).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(&format!("{op_name} output", op_name = op_name(&op)))?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    /// `a · b` for `a: m×n`, `b: n×p`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let (n2, p) = self.value(b).dims2()?;
        if n != n2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {n} and {n2} disagree"
            )));
        }
        let mut out = vec![0.0; m * p];
        kernels::gemm(
            m,
            n,
            p,
            View::row_major(self.value(a).data(), n),
            View::row_major(self.value(b).data(), p),
            0.0,
            ViewMut::row_major(&mut out, p),
        );
        self.push(Tensor::matrix(m, p, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), &[a])
    }

    /// Length-preserving dilated convolution over time. `signal` is `T×Cin`,
    /// `kernel` is `Cout×Cin×W` with odd `W`; padding is `(W−1)/2·dilation`
    /// zeros on each side.
    pub fn conv1d_dilated(&mut self, signal: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (steps, cin) = self.value(signal).dims2()?;
        let &[cout, kin, width] = self.value(kernel).shape() else {
            return Err(Error::Dimension(format!(
                "conv1d: kernel must be Cout×Cin×W, got {:?}",
                self.value(kernel).shape()
            )));
        };
        if width % 2 == 0 {
            return Err(Error::UnsupportedKernel(width));
        }
        if dilation < 1 {
            return Err(Error::Parameter("conv1d: dilation must be ≥ 1".into()));
        }
        if kin != cin {
            return Err(Error::Dimension(format!(
                "conv1d: signal has {cin} channels, kernel expects {kin}"
            )));
        }
        let geom = ConvGeometry {
            steps,
            in_channels: cin,
            out_channels: cout,
            width,
            dilation,
        };
        let mut out = vec![0.0; steps * cout];
        kernels::conv1d_forward(geom, self.value(signal).data(), self.value(kernel).data(), &mut out);
        self.push(
            Tensor::matrix(steps, cout, out)?,
            Op::Conv1d {
                signal,
                kernel,
                geom,
            },
            &[signal, kernel],
        )
    }

    /// Adds a per-column bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match {c} columns",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape(self.value(a), self.value(b), "add")?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), &[a])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_cols: no inputs".into()));
        };
        let (rows, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {rows} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::matrix(rows, total, out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(src).dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::Dimension(format!(
                "slice_cols: [{start}, {}) outside {cols} columns",
                start + len
            )));
        }
        let data = self.value(src).data();
        let out: Vec<f64> = (0..rows)
            .flat_map(|i| data[i * cols + start..i * cols + start + len].iter().copied())
            .collect();
        self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { src, start }, &[src])
    }

    /// Selects leading-axis rows by index (repeats allowed).
    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.rank() == 0 {
            return Err(Error::Dimension("gather_rows: scalar input".into()));
        }
        if indices.is_empty() {
            return Err(Error::Parameter("gather_rows: empty index set".into()));
        }
        let rows = t.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Parameter(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let out: Vec<f64> = indices.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::GatherRows(src, indices.to_vec()), &[src])
    }

    /// Euclidean norm of each row: `T×D → [T]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!(
                "row_norms: expected a matrix, got {:?}",
                t.shape()
            )));
        }
        let out = Tensor::vector(t.row_norms())?;
        self.push(out, Op::RowNorms(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Elementwise product with a fixed mask. Inverted dropout passes
    /// `1/(1−p)` for kept units and `0` for dropped ones.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::Dimension(format!(
                "mask: {} entries for {} values",
                mask.len(),
                t.numel()
            )));
        }
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Mask(a, mask), &[a])
    }

    /// Elementwise binary cross-entropy against a constant target, with
    /// scores clamped to `[lo, hi]` before the logarithms.
    pub fn bce(&mut self, scores: Var, target: f64, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(scores).map(|s| {
            let p = s.clamp(lo, hi);
            -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
        });
        self.push(out, Op::Bce { scores, target, lo, hi }, &[scores])
    }

    /// Reverse-mode accumulation from a scalar `loss`. Each node is visited
    /// once, in reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Intermediate nodes keep their gradients too; callers only ask for leaves.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = self.value(*a).dims2().expect("matmul lhs");
                let p = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    add_into(&mut grads[a.0], &[m, n], |da| {
                        kernels::gemm(m, p, n, View::row_major(gd, p), View::transposed(bv, p), 1.0, ViewMut::row_major(da, n));
                    });
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    add_into(&mut grads[b.0], &[n, p], |db| {
                        kernels::gemm(n, m, p, View::transposed(av, n), View::row_major(gd, p), 1.0, ViewMut::row_major(db, p));
                    });
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (r, c) = self.value(*a).dims2().expect("transpose input");
                    add_into(&mut grads[a.0], &[r, c], |da| {
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] += gd[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                self.accumulate(*a, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d += v));
            }
            Op::Conv1d {
                signal,
                kernel,
                geom,
            } => {
                if self.wants(*signal) {
                    let k = self.value(*kernel).data();
                    let shape = self.value(*signal).shape().to_vec();
                    add_into(&mut grads[signal.0], &shape, |ds| {
                        kernels::conv1d_backward_signal(*geom, gd, k, ds);
                    });
                }
                if self.wants(*kernel) {
                    let s = self.value(*signal).data();
                    let shape = self.value(*kernel).shape().to_vec();
                    add_into(&mut grads[kernel.0], &shape, |dk| {
                        kernels::conv1d_backward_kernel(*geom, gd, s, dk);
                    });
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, grads, |dx| dx.iter_mut().zip(gd).for_each(|(d, v)| *d += v));
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    add_into(&mut grads[b.0], &[c], |db| {
                        for row in gd.chunks_exact(c) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d += v));
                self.accumulate(*b, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d += v));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d += v));
                self.accumulate(*b, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d -= v));
            }
            Op::Scale(a, f) => {
                self.accumulate(*a, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d += f * v));
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, grads, |d| d.iter_mut().zip(gd).for_each(|(d, v)| *d += v));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(*a, grads, |d| {
                    for ((d, v), &xi) in d.iter_mut().zip(gd).zip(x) {
                        if xi > 0.0 {
                            *d += v;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate(*a, grads, |d| {
                    for ((d, v), &yi) in d.iter_mut().zip(gd).zip(y) {
                        *d += v * yi * (1.0 - yi);
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(*a, grads, |d| {
                    for ((d, v), &xi) in d.iter_mut().zip(gd).zip(x) {
                        *d += 2.0 * xi * v;
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.accumulate(*a, grads, |d| {
                    for ((d, v), &xi) in d.iter_mut().zip(gd).zip(x) {
                        // sign(0) = 0
                        if xi > 0.0 {
                            *d += v;
                        } else if xi < 0.0 {
                            *d -= v;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = out.data();
                let c = out.shape()[1];
                self.accumulate(*a, grads, |d| {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(gd.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((dd, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    self.accumulate(*p, grads, |d| {
                        for (drow, grow) in d.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                            drow.iter_mut().zip(&grow[start..start + w]).for_each(|(d, v)| *d += v);
                        }
                    });
                    start += w;
                }
            }
            Op::SliceCols { src, start } => {
                let cols = self.value(*src).shape()[1];
                let len = out.shape()[1];
                self.accumulate(*src, grads, |d| {
                    for (drow, grow) in d.chunks_exact_mut(cols).zip(gd.chunks_exact(len)) {
                        drow[*start..start + len].iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::GatherRows(src, idx) => {
                let w = self.value(*src).row_len();
                self.accumulate(*src, grads, |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        d[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&gd[k * w..(k + 1) * w])
                            .for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::RowNorms(a) => {
                let x = self.value(*a);
                let w = x.row_len();
                let norms = out.data();
                self.accumulate(*a, grads, |d| {
                    for (i, (&n, &gv)) in norms.iter().zip(gd).enumerate() {
                        // zero rows take the zero subgradient
                        if n > 0.0 {
                            let s = gv / n;
                            d[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(x.row(i))
                                .for_each(|(d, xv)| *d += s * xv);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.accumulate(*a, grads, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mean(a) => {
                let gv = gd[0] / self.value(*a).numel() as f64;
                self.accumulate(*a, grads, |d| d.iter_mut().for_each(|d| *d += gv));
            }
            Op::Mask(a, mask) => {
                self.accumulate(*a, grads, |d| {
                    for ((d, v), m) in d.iter_mut().zip(gd).zip(mask) {
                        *d += v * m;
                    }
                });
            }
            Op::Bce {
                scores,
                target,
                lo,
                hi,
            } => {
                let s = self.value(*scores).data();
                self.accumulate(*scores, grads, |d| {
                    for ((d, v), &si) in d.iter_mut().zip(gd).zip(s) {
                        // derivative of the clamp is zero outside [lo, hi]
                        if si > *lo && si < *hi {
                            *d += v * (-(target / si) + (1.0 - target) / (1.0 - si));
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Tensor>], f: impl FnOnce(&mut [f64])) {
        if self.wants(v) {
            let shape = self.value(v).shape().to_vec();
            add_into(&mut grads[v.0], &shape, f);
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Conv1d { .. } => "conv1d",
        Op::AddBias(..) => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Square(..) => "square",
        Op::Abs(..) => "abs",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::RowNorms(..) => "row_norms",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Mask(..) => "mask",
        Op::Bce { .. } => "bce",
    }
}
