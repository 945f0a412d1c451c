//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order. Each recorded node
//! keeps its forward value plus whatever it needs for the backward pass, and
//! [`Tape::backward`] walks the record in reverse, accumulating gradients
//! into every node that (transitively) depends on a gradient-tracking leaf.
//!
//! Operations return `Err` on shape mismatch or when they would produce a
//! non-finite value, so a NaN never propagates silently.
//!
//! ```
//! use refi_core::autodiff::Tape;
//! use refi_core::matrix::Matrix;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
//! let loss = tape.sum(w).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w), Matrix::filled(2, 2, 1.0));
//! ```

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Broadcast(Var),
    Transpose(Var),
    Softmax(Var),
    Sigmoid(Var),
    Relu(Var),
    Log { x: Var, lo: f64, hi: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    MeanRows(Var),
    VarRows(Var),
    L2NormRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass; zeros for unreachable values.
    pub fn grad(&self, v: Var) -> Matrix {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shape(v);
                Matrix::zeros(r, c)
            }
        }
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---- forward primitives -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let out = va.matmul(vb);
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape("matmul_nt", format!("{:?} x {:?}ᵀ", va.shape(), vb.shape())));
        }
        let out = va.matmul_nt(vb);
        self.push("matmul_nt", out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("hadamard", out, Op::Hadamard(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push("div", out, Op::Div(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scalar_mul", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_scalar", out, Op::AddConst(a), &[a])
    }

    /// Expands a `1x1`, `1xc` or `rx1` value to `rows x cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.shape();
        let ok = (r == 1 || r == rows) && (c == 1 || c == cols);
        if !ok {
            return Err(Error::shape("broadcast", format!("{:?} to {:?}", (r, c), (rows, cols))));
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, v.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j }));
            }
        }
        self.push("broadcast", out, Op::Broadcast(a), &[a])
    }

    /// A `1 x c` row repeated `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::shape("broadcast_row", format!("expected a single row, got {r}")));
        }
        self.broadcast(a, rows, c)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax of `a + mask`. Mask entries are `0` or `-inf`; masked
    /// positions come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Matrix>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            same_shape("softmax_rows", x, m)?;
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            if let Some(m) = mask {
                for (v, &mv) in row.iter_mut().zip(m.row(i)) {
                    *v += mv;
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::NonFinite("softmax_rows (fully masked row)"));
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push("softmax_rows", out, Op::Softmax(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Elementwise clamp; the gradient passes only where `lo <= a <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp { x: a, lo, hi }, &[a])
    }

    /// `ln(clamp(a, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.clamp(lo, hi).ln());
        self.push("log_clamped", out, Op::Log { x: a, lo, hi }, &[a])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        self.push("layer_norm_rows", out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Column means over rows, `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let out = Matrix::row_vector(&column_means(x));
        self.push("mean_rows", out, Op::MeanRows(a), &[a])
    }

    /// Population variance of each column, `r x c -> 1 x c`.
    pub fn var_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::shape("var_rows", "no rows"));
        }
        let mean = column_means(x);
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]) * (v - mean[j]);
            }
        }
        let r = x.rows() as f64;
        var.iter_mut().for_each(|v| *v /= r);
        self.push("var_rows", Matrix::row_vector(&var), Op::VarRows(a), &[a])
    }

    /// Euclidean norm of each row, `r x c -> r x 1`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms: Vec<f64> = (0..x.rows()).map(|i| crate::matrix::norm(x.row(i))).collect();
        self.push("l2_norm_rows", Matrix::column(&norms), Op::L2NormRows(a), &[a])
    }

    /// Each row divided by its norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = crate::matrix::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        self.push("normalize_rows", out, Op::NormalizeRows { x: a, norms }, &[a])
    }

    /// Row-wise inner products, `r x c, r x c -> r x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("row_dot", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..va.rows()).map(|i| crate::matrix::dot(va.row(i), vb.row(i))).collect();
        self.push("row_dot", Matrix::column(&out), Op::RowDot(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty"));
        }
        let s = self.sum(a)?;
        self.scalar_mul(s, 1.0 / n as f64)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{} vs {} columns", v.cols(), cols)));
            }
            data.extend_from_slice(v.as_slice());
            rows += v.rows();
        }
        self.push("concat_rows", Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {} rows", x.rows())));
        }
        let out = Matrix::from_vec(end - start, x.cols(), x.as_slice()[start * x.cols()..end * x.cols()].to_vec());
        self.push("slice_rows", out, Op::SliceRows { x: a, start }, &[a])
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {}", x.rows())));
        }
        let out = x.select_rows(idx);
        self.push("gather_rows", out, Op::GatherRows { x: a, idx: idx.to_vec() }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{} vs {} rows", v.rows(), rows)));
            }
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {} columns", x.cols())));
        }
        let mut out = Matrix::zeros(x.rows(), end - start);
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..end]);
        }
        self.push("slice_cols", out, Op::SliceCols { x: a, start }, &[a])
    }

    // ---- common compositions ------------------------------------------

    /// `x · w + b`, with `b` a single row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw).0;
        let bb = self.broadcast_row(b, rows)?;
        self.add(xw, bb)
    }

    /// Multiplies every entry of `x` by the `1x1` value `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let sb = self.broadcast(s, r, c)?;
        self.hadamard(x, sb)
    }

    // ---- backward -----------------------------------------------------

    /// Populates gradients of `loss` (a `1x1` value) with respect to every
    /// tracked value recorded before it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward called twice without zero_grad"));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Backward("loss must be a 1x1 scalar"));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match &self.nodes[idx].op {
                Op::Leaf => continue,
                _ => match self.grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) {
        // The op is moved out temporarily so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let ga = g.matmul_nt(self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.tracked(*b) {
                    let gb = self.value(*a).matmul_tn(g);
                    self.accumulate(*b, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                if self.tracked(*a) {
                    let ga = g.matmul(self.value(*b));
                    self.accumulate(*a, ga);
                }
                if self.tracked(*b) {
                    let gb = g.matmul_tn(self.value(*a));
                    self.accumulate(*b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.map(|v| -v));
            }
            Op::Hadamard(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                let ga = g.zip_map(vb, |x, y| x / y);
                let out = &self.nodes[idx].value;
                // d(a/b)/db = -(a/b)/b
                let gb = g.zip_map(&out.zip_map(vb, |q, y| q / y), |x, y| -x * y);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, g.map(|v| v * c));
            }
            Op::AddConst(a) => self.accumulate(*a, g.clone()),
            Op::Broadcast(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let (ti, tj) = (if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j });
                        ga.set(ti, tj, ga.get(ti, tj) + g.get(i, j));
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Transpose(a) => self.accumulate(*a, g.transpose()),
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&self.nodes[idx].value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(*a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(*a, ga);
            }
            Op::Log { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*x), |gv, v| if v < lo || v > hi { 0.0 } else { gv / v });
                self.accumulate(*x, ga);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let ga = g.zip_map(self.value(*x), |gv, v| if v < lo || v > hi { 0.0 } else { gv });
                self.accumulate(*x, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[idx].value;
                let c = y.cols() as f64;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((o, &yv), &gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(*x, ga);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        ga.set(i, j, g.get(0, j) / r as f64);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::VarRows(a) => {
                let x = self.value(*a);
                let mean = column_means(x);
                let r = x.rows() as f64;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        ga.set(i, j, g.get(0, j) * 2.0 * (x.get(i, j) - mean[j]) / r);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::L2NormRows(a) => {
                let x = self.value(*a);
                let norms = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let n = norms.get(i, 0);
                    if n > 0.0 {
                        let s = g.get(i, 0) / n;
                        for (o, &v) in ga.row_mut(i).iter_mut().zip(x.row(i)) {
                            *o = s * v;
                        }
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let n = norms[i];
                    if n > 0.0 {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let gy: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * gy) / n;
                        }
                    }
                }
                self.accumulate(*x, ga);
            }
            Op::RowDot(a, b) => {
                let row_scaled = |m: &Matrix| {
                    let mut out = m.clone();
                    for i in 0..out.rows() {
                        let s = g.get(i, 0);
                        out.row_mut(i).iter_mut().for_each(|v| *v *= s);
                    }
                    out
                };
                let ga = row_scaled(self.value(*b));
                let gb = row_scaled(self.value(*a));
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(*a, Matrix::filled(r, c, g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.tracked(p) {
                        let part = Matrix::from_vec(r, c, g.as_slice()[offset * c..(offset + r) * c].to_vec());
                        self.accumulate(p, part);
                    }
                    offset += r;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut ga = Matrix::zeros(r, c);
                ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                self.accumulate(*x, ga);
            }
            Op::GatherRows { x, idx: rows } => {
                let (r, c) = self.shape(*x);
                let mut ga = Matrix::zeros(r, c);
                for (k, &src) in rows.iter().enumerate() {
                    for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(*x, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.tracked(p) {
                        let mut part = Matrix::zeros(r, c);
                        for i in 0..r {
                            part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                        }
                        self.accumulate(p, part);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(*x, ga);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn column_means(x: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let r = x.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= r);
    mean
}
