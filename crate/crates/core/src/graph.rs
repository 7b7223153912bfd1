//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order; node indices are
//! therefore a topological order and `backward` is a single reverse sweep.
//! A graph is owned by one thread. Batches run one graph per sample and
//! reduce the resulting [`Gradients`] in a fixed order.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, log_softmax_rows, softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Log,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    Unfold { x: Var, kernel: usize, stride: usize },
    RowReplace { x: Var, emb: Var, mask: Vec<bool> },
    PickSum { x: Var, picks: Vec<(usize, f64)> },
    Sum(Var),
    Element(Var, usize),
    Custom { x: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// `self += other` entrywise over parameters; keys missing in `self` are inserted.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.params {
            match self.params.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.params.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.params.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn from_params(params: BTreeMap<String, Tensor>) -> Self {
        Self {
            params,
            leaves: BTreeMap::new(),
        }
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf input whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter. Repeated binds of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Param(name.to_string()), true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds a parameter as a constant (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        Ok(self.constant(t))
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        check_finite(&t, "matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        check_finite(&t, op)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op: &'static str, x: Var, r: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let (rows, cols) = self.dims(x)?;
        if self.value(r).len() != cols {
            return Err(Error::shape(
                op,
                format!("row of {} vs {:?}", cols, self.value(r).shape()),
            ));
        }
        let vx = self.value(x).data();
        let vr = self.value(r).data();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(f(vx[i * cols + j], vr[j]));
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        check_finite(&t, op)?;
        let rg = self.rg(&[x, r]);
        Ok(self.push(t, node, rg))
    }

    /// `x[r, c] + bias[c]` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, bias, |a, b| a + b, Op::AddRow(x, bias))
    }

    /// `x[r, c] * gain[c]` for every row.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, gain, |a, b| a * b, Op::MulRow(x, gain))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        check_finite(&t, "scale")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, s), rg))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + s);
        check_finite(&t, "add_scalar")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AddScalar(x), rg))
    }

    /// `x * s` where `s` is a scalar node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "scale must be a scalar"));
        }
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v * sv);
        check_finite(&t, "scale_by")?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleBy(x, s), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if start > end || end > r {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let (_, c) = self.dims(*xs.first().ok_or_else(|| Error::shape("concat_rows", "empty"))?)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let (r, cx) = self.dims(x)?;
            if cx != c {
                return Err(Error::shape("concat_rows", format!("{cx} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(x).data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let (r, _) = self.dims(*xs.first().ok_or_else(|| Error::shape("concat_cols", "empty"))?)?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (rx, c) = self.dims(x)?;
            if rx != r {
                return Err(Error::shape("concat_cols", format!("{rx} vs {r} rows")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(xs);
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let t = match kind {
            Unary::Relu => self.value(x).map(|v| v.max(0.0)),
            Unary::Gelu => self.value(x).map(gelu),
            Unary::Sigmoid => self.value(x).map(sigmoid),
            Unary::Tanh => self.value(x).map(f64::tanh),
            Unary::Log => self.value(x).map(f64::ln),
            Unary::Exp => self.value(x).map(f64::exp),
        };
        check_finite(&t, "unary")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Unary(x, kind), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Clamp(x, lo, hi), rg))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        check_finite(&t, "layer_norm")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LayerNorm(x, inv_std), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = softmax_rows(self.value(x))?;
        check_finite(&t, "softmax")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = log_softmax_rows(self.value(x))?;
        check_finite(&t, "log_softmax")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax(x), rg))
    }

    /// Frames a time-major `[n, c]` signal into `[t, kernel * c]` patches
    /// (`t = (n - kernel) / stride + 1`), the im2col step of a strided conv.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c) = self.dims(x)?;
        if kernel == 0 || stride == 0 || n < kernel {
            return Err(Error::shape(
                "unfold",
                format!("{n} frames, kernel {kernel}, stride {stride}"),
            ));
        }
        let t_out = (n - kernel) / stride + 1;
        let w = kernel * c;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(t_out * w);
        for t in 0..t_out {
            let s = t * stride * c;
            data.extend_from_slice(&src[s..s + w]);
        }
        let t = Tensor::new(vec![t_out, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Unfold { x, kernel, stride }, rg))
    }

    /// Replaces rows where `mask` is set by the vector `emb`.
    pub fn row_replace(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if mask.len() != r {
            return Err(Error::shape("row_replace", format!("mask {} vs {r} rows", mask.len())));
        }
        if self.value(emb).len() != c {
            return Err(Error::shape(
                "row_replace",
                format!("embedding {:?} vs width {c}", self.value(emb).shape()),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        let e = self.value(emb).data();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                data[i * c..(i + 1) * c].copy_from_slice(e);
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(&[x, emb]);
        Ok(self.push(
            t,
            Op::RowReplace {
                x,
                emb,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `sum_i w_i * x.flat[idx_i]`.
    pub fn pick_sum(&mut self, x: Var, picks: Vec<(usize, f64)>) -> Result<Var> {
        let src = self.value(x).data();
        let mut s = 0.0;
        for &(i, w) in &picks {
            let v = *src
                .get(i)
                .ok_or_else(|| Error::shape("pick_sum", format!("index {i} of {}", src.len())))?;
            s += w * v;
        }
        let t = Tensor::scalar(s);
        check_finite(&t, "pick_sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::PickSum { x, picks }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        check_finite(&t, "sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn element(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(i)
            .ok_or_else(|| Error::shape("element", format!("index {i}")))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Element(x, i), rg))
    }

    /// Scalar node with an externally computed value and local gradient
    /// `d value / d x` (used for dynamic-programming losses).
    pub fn custom_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(Error::shape("custom_scalar", "gradient shape differs from input"));
        }
        let t = Tensor::scalar(value);
        check_finite(&t, "custom_scalar")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Custom { x, grad }, rg))
    }

    /// Sum of scalar nodes in the given order.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs.first().ok_or_else(|| Error::shape("add_scalars", "empty"))?;
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        }
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(name) => {
                    out.params.insert(name.clone(), g);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        // Bound but unreachable parameters report zeros.
        for (name, &v) in &self.bound {
            out.params
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.acc(grads, *a, |ga| gemm_nt_acc(gd, bv, ga.data_mut(), m, n, k));
                self.acc(grads, *b, |gb| gemm_tn_acc(av, gd, gb.data_mut(), m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for (o, v) in gb.data_mut().iter_mut().zip(gd) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| {
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(gd).zip(bv) {
                        *o += gv * bv;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(gd).zip(av) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = self.value(*bias).len();
                self.acc(grads, *x, |gx| gx.add_assign(g));
                self.acc(grads, *bias, |gb| {
                    let gbd = gb.data_mut();
                    for (i, v) in gd.iter().enumerate() {
                        gbd[i % c] += v;
                    }
                });
            }
            Op::MulRow(x, gain) => {
                let c = self.value(*gain).len();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                self.acc(grads, *x, |gx| {
                    for (i, (o, v)) in gx.data_mut().iter_mut().zip(gd).enumerate() {
                        *o += v * gv[i % c];
                    }
                });
                self.acc(grads, *gain, |gg| {
                    let ggd = gg.data_mut();
                    for (i, (v, xv)) in gd.iter().zip(xv).enumerate() {
                        ggd[i % c] += v * xv;
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |gx| {
                for (o, v) in gx.data_mut().iter_mut().zip(gd) {
                    *o += v * s;
                }
            }),
            Op::AddScalar(x) => self.acc(grads, *x, |gx| gx.add_assign(g)),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx.data_mut().iter_mut().zip(gd) {
                        *o += v * sv;
                    }
                });
                self.acc(grads, *s, |gs| {
                    let d: f64 = gd.iter().zip(xv).map(|(a, b)| a * b).sum();
                    gs.data_mut()[0] += d;
                });
            }
            Op::Transpose(x) => self.acc(grads, *x, |gx| gx.add_assign(&g.transpose().unwrap())),
            Op::SliceRows(x, start) => {
                let (_, c) = self.value(*x).dims2().unwrap();
                self.acc(grads, *x, |gx| {
                    let dst = &mut gx.data_mut()[start * c..start * c + gd.len()];
                    for (o, v) in dst.iter_mut().zip(gd) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let w = gd.len() / r.max(1);
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for i in 0..r {
                        for j in 0..w {
                            gxd[i * c + start + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc(grads, x, |gx| {
                        for (o, v) in gx.data_mut().iter_mut().zip(&gd[off..off + n]) {
                            *o += v;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let (r, total) = y.dims2().unwrap();
                let mut off = 0;
                for &x in xs {
                    let (_, w) = self.value(x).dims2().unwrap();
                    self.acc(grads, x, |gx| {
                        let gxd = gx.data_mut();
                        for i in 0..r {
                            for j in 0..w {
                                gxd[i * w + j] += gd[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = y.data();
                let kind = *kind;
                self.acc(grads, *x, |gx| {
                    for (i, o) in gx.data_mut().iter_mut().enumerate() {
                        let d = match kind {
                            Unary::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(xv[i]),
                            Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Unary::Tanh => 1.0 - yv[i] * yv[i],
                            Unary::Log => 1.0 / xv[i],
                            Unary::Exp => yv[i],
                        };
                        *o += gd[i] * d;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for (i, o) in gx.data_mut().iter_mut().enumerate() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            *o += gd[i];
                        }
                    }
                });
            }
            Op::LayerNorm(x, inv_std) => {
                let (r, c) = y.dims2().unwrap();
                let yv = y.data();
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for i in 0..r {
                        let gr = &gd[i * c..(i + 1) * c];
                        let yr = &yv[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gxd[i * c + j] += inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (r, c) = y.dims2().unwrap();
                let yv = y.data();
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for i in 0..r {
                        let gr = &gd[i * c..(i + 1) * c];
                        let yr = &yv[i * c..(i + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxd[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (r, c) = y.dims2().unwrap();
                let yv = y.data();
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for i in 0..r {
                        let gr = &gd[i * c..(i + 1) * c];
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            gxd[i * c + j] += gr[j] - yv[i * c + j].exp() * s;
                        }
                    }
                });
            }
            Op::Unfold { x, kernel, stride } => {
                let (_, c) = self.value(*x).dims2().unwrap();
                let (t_out, w) = y.dims2().unwrap();
                debug_assert_eq!(w, kernel * c);
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for t in 0..t_out {
                        let s = t * stride * c;
                        for (o, v) in gxd[s..s + w].iter_mut().zip(&gd[t * w..(t + 1) * w]) {
                            *o += v;
                        }
                    }
                });
            }
            Op::RowReplace { x, emb, mask } => {
                let c = self.value(*emb).len();
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for j in 0..c {
                                gxd[i * c + j] += gd[i * c + j];
                            }
                        }
                    }
                });
                self.acc(grads, *emb, |ge| {
                    let ged = ge.data_mut();
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..c {
                                ged[j] += gd[i * c + j];
                            }
                        }
                    }
                });
            }
            Op::PickSum { x, picks } => {
                let g0 = gd[0];
                self.acc(grads, *x, |gx| {
                    let gxd = gx.data_mut();
                    for &(i, w) in picks {
                        gxd[i] += g0 * w;
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |gx| {
                    for o in gx.data_mut() {
                        *o += g0;
                    }
                });
            }
            Op::Element(x, i) => {
                let g0 = gd[0];
                self.acc(grads, *x, |gx| gx.data_mut()[*i] += g0);
            }
            Op::Custom { x, grad } => {
                let g0 = gd[0];
                self.acc(grads, *x, |gx| {
                    for (o, v) in gx.data_mut().iter_mut().zip(grad.data()) {
                        *o += g0 * v;
                    }
                });
            }
        }
    }
}
