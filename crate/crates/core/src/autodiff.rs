//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every primitive pushes a node onto a [`Tape`]. A node whose operands all
//! lack `requires_grad` is stored as a plain constant, so only operations that
//! can carry gradient are recorded. [`Tape::backward`] walks the recorded
//! nodes once, in reverse creation order, accumulating adjoints.
//!
//! Reductions accumulate left to right in index order, so forward values and
//! gradients are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    SubRow(Var, Var),
    Outer(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    GlobalAvgPool(Var),
    MeanAxis0(Var),
    VarianceAxis0(Var),
    Mean(Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    PickPerRow(Var, Vec<usize>),
    SelectColumns(Var, Vec<usize>),
    ConcatColumns(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `var`; all zeros when `var` does not influence
    /// the differentiated scalar.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.grads.get(var.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Indices of the recorded operations whose adjoints were replayed, in
    /// replay order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0; rank],
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &x in row {
        total += (x - max).exp();
    }
    let lse = max + total.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn conv_out_dim(input: usize, kernel: usize, geom: ConvGeometry) -> Option<usize> {
    let padded = input + 2 * geom.padding;
    if padded < kernel || geom.stride == 0 {
        return None;
    }
    Some((padded - kernel) / geom.stride + 1)
}

/// Iterates the valid `(ky, kx, iy, ix)` taps of output pixel `(oy, ox)`.
#[inline]
fn for_each_tap(
    oy: usize,
    ox: usize,
    k: (usize, usize),
    in_hw: (usize, usize),
    geom: ConvGeometry,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for ky in 0..k.0 {
        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
        if iy < 0 || iy >= in_hw.0 as isize {
            continue;
        }
        for kx in 0..k.1 {
            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
            if ix < 0 || ix >= in_hw.1 as isize {
                continue;
            }
            f(ky, kx, iy as usize, ix as usize);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes (leaves, constants and recorded operations).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded (differentiable) operations.
    pub fn record_len(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    /// Direct 2-D convolution over `N x H x W x Cin` input with an
    /// `Kh x Kw x Cin x Cout` kernel and a length-`Cout` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", w, 4)?;
        let [n, h, wd, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [kh, kw, wci, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        if wci != ci {
            return Err(shape_err("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [co] {
            return Err(shape_err("conv2d", w.shape(), b.shape()));
        }
        let (oh, ow) = match (conv_out_dim(h, kh, geom), conv_out_dim(wd, kw, geom)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(shape_err("conv2d", x.shape(), w.shape())),
        };
        let (xd, wdata, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; n * oh * ow * co];
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[((s * oh + oy) * ow + ox) * co..][..co];
                    o.copy_from_slice(bd);
                    for_each_tap(oy, ox, (kh, kw), (h, wd), geom, |ky, kx, iy, ix| {
                        let xin = &xd[((s * h + iy) * wd + ix) * ci..][..ci];
                        let wk = &wdata[(ky * kw + kx) * ci * co..][..ci * co];
                        for (c, &xv) in xin.iter().enumerate() {
                            for (ov, &wv) in o.iter_mut().zip(&wk[c * co..(c + 1) * co]) {
                                *ov += xv * wv;
                            }
                        }
                    });
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, co], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
        ))
    }

    /// `x W^T + b` for `x: N x I`, `W: O x I`, `b: O`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        expect_rank("linear", x, 2)?;
        expect_rank("linear", w, 2)?;
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        if w.shape()[1] != i {
            return Err(shape_err("linear", x.shape(), w.shape()));
        }
        if b.shape() != [o] {
            return Err(shape_err("linear", w.shape(), b.shape()));
        }
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            let xr = x.row(r);
            for k in 0..o {
                let mut acc = b.data()[k];
                for (xv, wv) in xr.iter().zip(w.row(k)) {
                    acc += xv * wv;
                }
                out[r * o + k] = acc;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("matmul", ta, 2)?;
        expect_rank("matmul", tb, 2)?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        if tb.shape()[0] != k {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += ta.at2(r, j) * tb.at2(j, c);
                }
                out[r * n + c] = acc;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("transpose", t, 2)?;
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = t.at2(r, c);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise division; fails if any denominator is zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(pos) = self.value(b).data().iter().position(|&d| d == 0.0) {
            return Err(Error::Numeric {
                op: "div",
                detail: format!("zero denominator at flat index {pos}"),
            });
        }
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Subtracts a length-`C` row from every row of an `N x C` matrix.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        expect_rank("sub_row", ta, 2)?;
        let c = ta.shape()[1];
        if tr.shape() != [c] {
            return Err(shape_err("sub_row", ta.shape(), tr.shape()));
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x - tr.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::SubRow(a, row), &[a, row]))
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("outer", ta, 1)?;
        expect_rank("outer", tb, 1)?;
        let (m, n) = (ta.len(), tb.len());
        let mut out = Vec::with_capacity(m * n);
        for &x in ta.data() {
            for &y in tb.data() {
                out.push(x * y);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Outer(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Elementwise square root; fails on negative input. The derivative at
    /// exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(pos) = self.value(a).data().iter().position(|&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Numeric {
                op: "sqrt",
                detail: format!("negative input at flat index {pos}"),
            });
        }
        Ok(self.map(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Natural logarithm; fails on non-positive input.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(pos) = self.value(a).data().iter().position(|&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!(
                    "non-positive input {} at flat index {pos}",
                    self.value(a).data()[pos]
                ),
            });
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Spatial mean of an `N x H x W x C` map, giving `N x C`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("global_avg_pool", t, 4)?;
        let [n, h, w, c] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
        let area = (h * w) as f64;
        let mut out = vec![0.0; n * c];
        for s in 0..n {
            let o = &mut out[s * c..(s + 1) * c];
            for p in 0..h * w {
                for (ov, &x) in o.iter_mut().zip(&t.data()[(s * h * w + p) * c..][..c]) {
                    *ov += x;
                }
            }
            for ov in o.iter_mut() {
                *ov /= area;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(a), &[a]))
    }

    /// Column means of an `N x C` matrix.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("mean_axis0", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        Ok(self.push(Tensor::from_vec(out), Op::MeanAxis0(a), &[a]))
    }

    /// Biased (1/N) column variances of an `N x C` matrix.
    pub fn variance_axis0(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        expect_rank("variance_axis0", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let means = column_means(t);
        let mut out = vec![0.0; c];
        for r in 0..n {
            for ((o, &x), &m) in out.iter_mut().zip(t.row(r)).zip(&means) {
                *o += (x - m) * (x - m);
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        Ok(self.push(Tensor::from_vec(out), Op::VarianceAxis0(a), &[a]))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum();
        let value = Tensor::scalar(total / t.len() as f64);
        self.push(value, Op::Mean(a), &[a])
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Row-wise softmax of an `N x C` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise("softmax", a, Op::Softmax(a), softmax_row)
    }

    /// Row-wise log-softmax of an `N x C` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise("log_softmax", a, Op::LogSoftmax(a), log_softmax_row)
    }

    fn rowwise(&mut self, name: &'static str, a: Var, op: Op, f: fn(&[f64], &mut [f64])) -> Result<Var> {
        let t = self.value(a);
        expect_rank(name, t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            f(t.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, op, &[a]))
    }

    /// Picks `a[r, indices[r]]` from each row, giving a length-`N` vector.
    pub fn pick_per_row(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        expect_rank("pick_per_row", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if indices.len() != n {
            return Err(shape_err("pick_per_row", t.shape(), &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Invalid(format!(
                "pick_per_row: index {bad} out of range for {c} columns"
            )));
        }
        let out = indices.iter().enumerate().map(|(r, &i)| t.at2(r, i)).collect();
        Ok(self.push(
            Tensor::from_vec(out),
            Op::PickPerRow(a, indices.to_vec()),
            &[a],
        ))
    }

    /// Gathers the listed columns of an `N x C` matrix, in the given order.
    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        expect_rank("select_columns", t, 2)?;
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Invalid(format!(
                "select_columns: column {bad} out of range for {c} columns"
            )));
        }
        let mut out = Vec::with_capacity(n * cols.len());
        for r in 0..n {
            out.extend(cols.iter().map(|&j| t.at2(r, j)));
        }
        let value = Tensor::new(vec![n, cols.len()], out)?;
        Ok(self.push(value, Op::SelectColumns(a, cols.to_vec()), &[a]))
    }

    /// Concatenates `N x C_k` matrices along columns.
    pub fn concat_columns(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Invalid("concat_columns: no inputs".into()));
        };
        let n = self.value(*first).shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            expect_rank("concat_columns", t, 2)?;
            if t.shape()[0] != n {
                return Err(shape_err("concat_columns", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        Ok(self.push(value, Op::ConcatColumns(parts.to_vec()), parts))
    }

    /// Reverse-mode gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad || matches!(root.op, Op::Leaf) {
            return Err(Error::NoRecord);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::Leaf) {
                visited.push(idx);
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("adjoint shape")))
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            visited,
        })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv2d_backward(*input, *weight, *bias, *geom, node.value.shape(), g, grads),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, i) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if let Some(gx) = self.slot(grads, *input) {
                    for r in 0..n {
                        for k in 0..o {
                            let gv = g[r * o + k];
                            for (gxv, &wv) in gx[r * i..(r + 1) * i].iter_mut().zip(w.row(k)) {
                                *gxv += gv * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *weight) {
                    for r in 0..n {
                        for k in 0..o {
                            let gv = g[r * o + k];
                            for (gwv, &xv) in gw[k * i..(k + 1) * i].iter_mut().zip(x.row(r)) {
                                *gwv += gv * xv;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..n {
                        for (gbv, &gv) in gb.iter_mut().zip(&g[r * o..(r + 1) * o]) {
                            *gbv += gv;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..m {
                        for j in 0..k {
                            let mut acc = 0.0;
                            for c in 0..n {
                                acc += g[r * n + c] * tb.at2(j, c);
                            }
                            ga[r * k + j] += acc;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for j in 0..k {
                        for c in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += ta.at2(r, j) * g[r * n + c];
                            }
                            gb[j * n + c] += acc;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(tb) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(ta) {
                        *x += gy * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let tb = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(tb) {
                        *x += gy / bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (((x, &gy), &bv), &q) in gb.iter_mut().zip(g).zip(tb).zip(out) {
                        *x -= gy * q / bv;
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * s);
                }
            }
            Op::SubRow(a, row) => {
                let c = self.value(*row).len();
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    for (i, &y) in g.iter().enumerate() {
                        gr[i % c] -= y;
                    }
                }
            }
            Op::Outer(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = tb.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, gav) in ga.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (c, &bv) in tb.iter().enumerate() {
                            acc += g[r * n + c] * bv;
                        }
                        *gav += acc;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (c, gbv) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (r, &av) in ta.iter().enumerate() {
                            acc += g[r * n + c] * av;
                        }
                        *gbv += acc;
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gv, &y), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *gv += y;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gv, &y), &s) in ga.iter_mut().zip(g).zip(out) {
                        *gv += y * s * (1.0 - s);
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gv, &y), &r) in ga.iter_mut().zip(g).zip(out) {
                        if r > 0.0 {
                            *gv += y / (2.0 * r);
                        }
                    }
                }
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gv, &y), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *gv += y / xv;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gv, &y), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv >= *lo && xv <= *hi {
                            *gv += y;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.value(*a).shape();
                let [n, h, w, c] = [s[0], s[1], s[2], s[3]];
                let area = (h * w) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for smp in 0..n {
                        let gs = &g[smp * c..(smp + 1) * c];
                        for p in 0..h * w {
                            for (gv, &y) in ga[(smp * h * w + p) * c..][..c].iter_mut().zip(gs) {
                                *gv += y / area;
                            }
                        }
                    }
                }
            }
            Op::MeanAxis0(a) => {
                let n = self.value(*a).shape()[0];
                let c = g.len();
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, gv) in ga.iter_mut().enumerate() {
                        *gv += g[i % c] / n as f64;
                    }
                }
            }
            Op::VarianceAxis0(a) => {
                let t = self.value(*a);
                let n = t.shape()[0];
                let c = g.len();
                let means = column_means(t);
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, (gv, &x)) in ga.iter_mut().zip(t.data()).enumerate() {
                        *gv += g[i % c] * 2.0 * (x - means[i % c]) / n as f64;
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Softmax(a) => {
                let c = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), pr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: f64 = yr.iter().zip(pr).map(|(y, p)| y * p).sum();
                        for ((gv, &y), &p) in gr.iter_mut().zip(yr).zip(pr) {
                            *gv += p * (y - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = node.value.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), lr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let total: f64 = yr.iter().sum();
                        for ((gv, &y), &l) in gr.iter_mut().zip(yr).zip(lr) {
                            *gv += y - l.exp() * total;
                        }
                    }
                }
            }
            Op::PickPerRow(a, indices) => {
                let c = self.value(*a).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, (&i, &y)) in indices.iter().zip(g).enumerate() {
                        ga[r * c + i] += y;
                    }
                }
            }
            Op::SelectColumns(a, cols) => {
                let c = self.value(*a).shape()[1];
                let k = cols.len();
                if k == 0 {
                    return;
                }
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, gr) in g.chunks(k).enumerate() {
                        for (&j, &y) in cols.iter().zip(gr) {
                            ga[r * c + j] += y;
                        }
                    }
                }
            }
            Op::ConcatColumns(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if w == 0 {
                        continue;
                    }
                    if let Some(gp) = self.slot(grads, p) {
                        for (r, gr) in gp.chunks_mut(w).enumerate() {
                            for (gv, &y) in gr.iter_mut().zip(&g[r * total + offset..]) {
                                *gv += y;
                            }
                        }
                    }
                    offset += w;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        out_shape: &[usize],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, h, wd, ci] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [kh, kw, _, co] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let (oh, ow) = (out_shape[1], out_shape[2]);
        let (xd, wdata) = (x.data(), w.data());

        if let Some(gb) = self.slot(grads, bias) {
            for go in g.chunks(co) {
                for (b, &y) in gb.iter_mut().zip(go) {
                    *b += y;
                }
            }
        }
        if let Some(gw) = self.slot(grads, weight) {
            for s in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g[((s * oh + oy) * ow + ox) * co..][..co];
                        for_each_tap(oy, ox, (kh, kw), (h, wd), geom, |ky, kx, iy, ix| {
                            let xin = &xd[((s * h + iy) * wd + ix) * ci..][..ci];
                            let gk = &mut gw[(ky * kw + kx) * ci * co..][..ci * co];
                            for (c, &xv) in xin.iter().enumerate() {
                                for (gv, &y) in gk[c * co..(c + 1) * co].iter_mut().zip(go) {
                                    *gv += xv * y;
                                }
                            }
                        });
                    }
                }
            }
        }
        if let Some(gx) = self.slot(grads, input) {
            for s in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let go = &g[((s * oh + oy) * ow + ox) * co..][..co];
                        for_each_tap(oy, ox, (kh, kw), (h, wd), geom, |ky, kx, iy, ix| {
                            let gin = &mut gx[((s * h + iy) * wd + ix) * ci..][..ci];
                            let wk = &wdata[(ky * kw + kx) * ci * co..][..ci * co];
                            for (c, gv) in gin.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (&wv, &y) in wk[c * co..(c + 1) * co].iter().zip(go) {
                                    acc += wv * y;
                                }
                                *gv += acc;
                            }
                        });
                    }
                }
            }
        }
    }
}

fn column_means(t: &Tensor) -> Vec<f64> {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut means = vec![0.0; c];
    for r in 0..n {
        for (m, &x) in means.iter_mut().zip(t.row(r)) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= n as f64);
    means
}
