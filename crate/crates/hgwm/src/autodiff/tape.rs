use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use super::params::ParamStore;
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

type ForwardFn = dyn Fn(&[&Tensor]) -> Result<Tensor>;
type BackwardFn = dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Result<Vec<Vec<f64>>>;

/// A user-supplied differentiable operation: a forward map and its adjoint.
///
/// The adjoint receives the inputs, the forward output and the upstream
/// gradient (same length as the output) and must return one gradient per
/// input, each with the input's length.
pub struct CustomOp {
    name: String,
    forward: Box<ForwardFn>,
    backward: Box<BackwardFn>,
}

impl CustomOp {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&[&Tensor]) -> Result<Tensor> + 'static,
        backward: impl Fn(&[&Tensor], &Tensor, &[f64]) -> Result<Vec<Vec<f64>>> + 'static,
    ) -> Rc<Self> {
        Rc::new(Self {
            name: name.into(),
            forward: Box::new(forward),
            backward: Box::new(backward),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for CustomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomOp({})", self.name)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    CrossEntropyRows(Var, Rc<Vec<Option<usize>>>),
    Custom(Rc<CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation. Nodes are appended
/// in evaluation order, so parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<Var, String>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.without_grad(), false, Op::Leaf)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.without_grad(), true, Op::Leaf)
    }

    /// A named trainable parameter pulled from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Autodiff(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(t.clone());
        self.params.insert(v, name.to_string());
        Ok(v)
    }

    fn rc(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).rows_cols().ok_or_else(|| Error::Shape {
            op,
            left: self.shape(v).to_vec(),
            right: vec![],
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a, "matmul")?;
        let (k2, n) = self.rc(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, op_name: &'static str, mul: bool) -> Result<Var> {
        let (m, n) = self.rc(a, op_name)?;
        if self.value(b).len() != n {
            return Err(Error::Shape {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bd = self.data(b);
        let ad = self.data(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(if mul { ad[i * n + j] * bd[j] } else { ad[i * n + j] + bd[j] });
            }
        }
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        Ok(self.push(Tensor::from_parts(shape, out), rg, op))
    }

    /// `a[i, j] + b[j]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "add_row", false)
    }

    /// `a[i, j] * b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, "mul_row", true)
    }

    /// `x w + b` for `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect());
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x + c).collect());
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| kind.apply(x)).collect());
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::Unary(a, kind))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x.max(lo)).collect());
        let rg = self.requires_grad(a);
        self.push(out, rg, Op::ClampMin(a, lo))
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rc(a, "softmax")?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&x[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::SoftmaxRows(a)))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine
    /// terms (compose with `mul_row` / `add_row` for those).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.rc(a, "layer_norm")?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let (mean, inv) = row_stats(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::LayerNormRows(a, eps)))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rc(a, "normalize_rows")?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-12) {
                return Err(Error::NonFinite {
                    what: format!("row {i} norm in normalize_rows"),
                });
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let rg = self.requires_grad(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::NormalizeRows(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Autodiff("concat of nothing".into()))?;
        let (m, _) = self.rc(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rc(p, "concat_cols")?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(vec![m, total], out), rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Autodiff("concat of nothing".into()))?;
        let (_, n) = self.rc(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.rc(p, "concat_rows")?;
            if c != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rc(a, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::Shape {
                op: "slice_cols",
                left: self.shape(a).to_vec(),
                right: vec![start, end],
            });
        }
        let x = self.data(a);
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&x[i * n + start..i * n + end]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(vec![m, w], out), rg, Op::SliceCols(a, start)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.rc(a, "slice_rows")?;
        if start > end || end > m {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.shape(a).to_vec(),
                right: vec![start, end],
            });
        }
        let out = self.data(a)[start * n..end * n].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(vec![end - start, n], out), rg, Op::SliceRows(a, start)))
    }

    /// `out[i] = a[idx[i]]`; gradients scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (m, n) = self.rc(a, "gather_rows")?;
        let x = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx.iter() {
            if r >= m {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: self.shape(a).to_vec(),
                    right: vec![r],
                });
            }
            out.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        let rg = self.requires_grad(a);
        let rows = idx.len();
        Ok(self.push(Tensor::from_parts(vec![rows, n], out), rg, Op::GatherRows(a, idx)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rc(a, "transpose")?;
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = Tensor::from_parts(shape, self.data(a).to_vec());
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Autodiff("mean of an empty tensor".into()));
        }
        let s = self.data(a).iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(a)))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().map(|x| x * x).sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::SumSq(a))
    }

    /// Summed softmax cross-entropy over the rows of `logits`; rows whose
    /// target is `None` contribute nothing.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let (m, n) = self.rc(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let x = self.data(logits);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= n {
                    return Err(Error::invalid("cross-entropy target", format!("class {t} with {n} logits")));
                }
                let row = &x[i * n..(i + 1) * n];
                total += log_sum_exp(row) - row[t];
            }
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(total), rg, Op::CrossEntropyRows(logits, targets)))
    }

    /// Applies a registered custom operation.
    pub fn custom(&mut self, op: &Rc<CustomOp>, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = (op.forward)(&tensors)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(out.without_grad(), rg, Op::Custom(op.clone(), inputs.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff("loss handle does not belong to this tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Autodiff(format!("backward needs a scalar loss, got shape {:?}", node.value.shape())));
        }
        if !node.requires_grad {
            return Err(Error::Autodiff("backward on a value detached from every gradient source".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).rows_cols().unwrap();
                let (_, n) = self.value(*b).rows_cols().unwrap();
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &|buf| matmul_bt_acc(g, bd, buf, m, n, k));
                send(*b, &|buf| matmul_at_acc(ad, g, buf, m, k, n));
            }
            Op::Add(a, b) => {
                send(*a, &|buf| add_into(buf, g));
                send(*b, &|buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|buf| add_into(buf, g));
                send(*b, &|buf| buf.iter_mut().zip(g).for_each(|(b, g)| *b -= g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &|buf| (0..buf.len()).for_each(|j| buf[j] += g[j] * bd[j]));
                send(*b, &|buf| (0..buf.len()).for_each(|j| buf[j] += g[j] * ad[j]));
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                send(*a, &|buf| add_into(buf, g));
                send(*b, &|buf| {
                    for (j, gv) in g.iter().enumerate() {
                        buf[j % n] += gv;
                    }
                });
            }
            Op::MulRow(a, b) => {
                let n = self.value(*b).len();
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, &|buf| (0..buf.len()).for_each(|j| buf[j] += g[j] * bd[j % n]));
                send(*b, &|buf| {
                    for (j, gv) in g.iter().enumerate() {
                        buf[j % n] += gv * ad[j];
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|buf| buf.iter_mut().zip(g).for_each(|(b, g)| *b += c * g)),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|buf| add_into(buf, g)),
            Op::Unary(a, kind) => {
                let x = self.data(*a);
                let y = out.data();
                send(*a, &|buf| {
                    for j in 0..buf.len() {
                        buf[j] += g[j] * kind.derivative(x[j], y[j]);
                    }
                });
            }
            Op::ClampMin(a, lo) => {
                let x = self.data(*a);
                send(*a, &|buf| {
                    for j in 0..buf.len() {
                        if x[j] > *lo {
                            buf[j] += g[j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.rows_cols().unwrap();
                let y = out.data();
                send(*a, &|buf| {
                    for r in 0..m {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            buf[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows(a, eps) => {
                let (m, n) = out.rows_cols().unwrap();
                let x = self.data(*a);
                let y = out.data();
                send(*a, &|buf| {
                    for r in 0..m {
                        let s = r * n..(r + 1) * n;
                        let (_, inv) = row_stats(&x[s.clone()], *eps);
                        let gm = g[s.clone()].iter().sum::<f64>() / n as f64;
                        let gy = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in s {
                            buf[j] += inv * (g[j] - gm - y[j] * gy);
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let (m, n) = out.rows_cols().unwrap();
                let x = self.data(*a);
                let y = out.data();
                send(*a, &|buf| {
                    for r in 0..m {
                        let s = r * n..(r + 1) * n;
                        let norm = x[s.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            buf[j] += (g[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.rows_cols().unwrap();
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.value(*p).rows_cols().unwrap();
                    send(*p, &|buf| {
                        for r in 0..m {
                            for c in 0..w {
                                buf[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    send(*p, &|buf| add_into(buf, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, w) = out.rows_cols().unwrap();
                let (_, n) = self.value(*a).rows_cols().unwrap();
                send(*a, &|buf| {
                    for r in 0..m {
                        for c in 0..w {
                            buf[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let (_, n) = out.rows_cols().unwrap();
                send(*a, &|buf| add_into(&mut buf[start * n..start * n + g.len()], g));
            }
            Op::GatherRows(a, idx) => {
                let (_, n) = out.rows_cols().unwrap();
                send(*a, &|buf| {
                    for (i, &r) in idx.iter().enumerate() {
                        add_into(&mut buf[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).rows_cols().unwrap();
                send(*a, &|buf| {
                    for r in 0..m {
                        for c in 0..n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &|buf| buf.iter_mut().for_each(|b| *b += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                send(*a, &|buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
            }
            Op::SumSq(a) => {
                let x = self.data(*a);
                send(*a, &|buf| (0..buf.len()).for_each(|j| buf[j] += 2.0 * x[j] * g[0]));
            }
            Op::CrossEntropyRows(a, targets) => {
                let (_, n) = self.value(*a).rows_cols().unwrap();
                let x = self.data(*a);
                send(*a, &|buf| {
                    let mut p = vec![0.0; n];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        softmax_into(&x[r * n..(r + 1) * n], &mut p);
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * n + j] += g[0] * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::Custom(op, inputs) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let adj = (op.backward)(&tensors, out, g)?;
                if adj.len() != inputs.len() {
                    return Err(Error::AdjointShape {
                        op: op.name.clone(),
                        input: adj.len(),
                        expected: inputs.len(),
                        got: adj.len(),
                    });
                }
                for (k, (v, a)) in inputs.iter().zip(&adj).enumerate() {
                    let expected = self.value(*v).len();
                    if a.len() != expected {
                        return Err(Error::AdjointShape {
                            op: op.name.clone(),
                            input: k,
                            expected,
                            got: a.len(),
                        });
                    }
                    send(*v, &|buf| add_into(buf, a));
                }
            }
        }
        Ok(())
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (b, v) in buf.iter_mut().zip(g) {
        *b += v;
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<Var, String>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of named parameters, summed when a name was pulled onto the
    /// tape more than once.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (v, name) in &self.params {
            if let Some(g) = self.wrt(*v) {
                match out.get_mut(name) {
                    Some(acc) => add_into(acc, g),
                    None => {
                        out.insert(name.clone(), g.to_vec());
                    }
                }
            }
        }
        out
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, g) in self.param_grads() {
            store
                .get_mut(&name)
                .ok_or_else(|| Error::Autodiff(format!("unknown parameter `{name}`")))?
                .accumulate_grad(&g)?;
        }
        Ok(())
    }
}
