//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates its forward
//! value eagerly and records the operands it read. Because operands must
//! already exist when a node is appended, insertion order is a topological
//! order, and [`Graph::backward`] simply walks the tape from the loss down to
//! the first node.
//!
//! Elementwise binary operations accept either two tensors of equal shape or
//! one 1×1 operand, which is broadcast.
//!
//! Subgradient convention: `relu`/`max0` have derivative 0 at exactly 0.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    AddRow(NodeId, NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    TopKSum {
        x: NodeId,
        selected: Vec<usize>,
    },
    Column(NodeId, usize),
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::AddRow(..) => "add_row",
            Op::BatchNorm { .. } => "batch_norm",
            Op::TopKSum { .. } => "top_k_sum",
            Op::Column(..) => "column",
            Op::ConcatCols(..) => "concat_cols",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Constant | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Column(a, _) => vec![*a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::TopKSum { x, .. } => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
}

/// Dynamic computation graph with taped backward pass.
#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    visits: usize,
    skip_finite_check: bool,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Indices of the `k` largest entries of `values`.
///
/// Ties are broken by ascending index, so the selected set is deterministic.
/// Uses partial selection; the returned indices are in ascending order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that accepts non-finite forward values instead of failing,
    /// for callers that locate bad entries themselves.
    pub fn unchecked() -> Self {
        Graph {
            skip_finite_check: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Scalar value of a 1×1 node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }

    /// Gradient accumulated by the last backward pass, if one reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, or zeros of the right shape when nothing reached it.
    pub fn grad_or_zero(&self, id: NodeId) -> Tensor {
        match self.grad(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.values[id.0].shape();
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.ops[id.0].name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.ops[id.0].parents()
    }

    /// Nodes processed by the most recent backward pass.
    pub fn visits(&self) -> usize {
        self.visits
    }

    /// Clears all gradients so backward may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
        self.visits = 0;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        let id = self.values.len();
        if !self.skip_finite_check && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            other => other.parents().iter().any(|p| self.requires_grad[p.0]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Ok(NodeId(id))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> Result<NodeId> {
        self.push(Tensor::scalar(value), Op::Constant)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Param)
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.ops[id.0], Op::Param)
    }

    fn broadcast_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa == sb || sb == (1, 1) {
            Ok(sa)
        } else if sa == (1, 1) {
            Ok(sb)
        } else {
            Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb })
        }
    }

    fn binary(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<NodeId> {
        let (r, c) = self.broadcast_shape(name, a, b)?;
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let n = r * c;
        let sa = va.len() == 1 && n != 1;
        let sb = vb.len() == 1 && n != 1;
        let (da, db) = (va.data(), vb.data());
        let data = (0..n)
            .map(|i| f(if sa { da[0] } else { da[i] }, if sb { db[0] } else { db[i] }))
            .collect();
        self.push(Tensor::from_vec(r, c, data)?, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm_into(&self.values[a.0], false, &self.values[b.0], false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.values[a.0].map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.values[a.0].map(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// `max(0, a)`; identical to [`Graph::relu`].
    pub fn max0(&mut self, a: NodeId) -> Result<NodeId> {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// `log(1 + exp(a))`.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.values[a.0].data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.values[a.0];
        if t.is_empty() {
            return Err(Error::ShapeMismatch { op: "mean", lhs: t.shape(), rhs: (1, 1) });
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// `x + 1·bias` where `bias` is a 1×C row broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.values[x.0].shape(), self.values[bias.0].shape());
        if sb != (1, sx.1) {
            return Err(Error::ShapeMismatch { op: "add_row", lhs: sx, rhs: sb });
        }
        let b = self.values[bias.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(sx.1.max(1)) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        self.push(out, Op::AddRow(x, bias))
    }

    /// `x·w + b` with `b` broadcast across rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Batch normalization over the rows of `x` (N×C), scaled by `gamma`
    /// and shifted by `beta` (both 1×C).
    ///
    /// With `running = None` the batch statistics are used and returned so
    /// the caller can update its running estimates. With
    /// `running = Some((mean, var))` those fixed statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let (n, c) = self.values[x.0].shape();
        for p in [gamma, beta] {
            let s = self.values[p.0].shape();
            if s != (1, c) {
                return Err(Error::ShapeMismatch { op: "batch_norm", lhs: (n, c), rhs: s });
            }
        }
        let xv = &self.values[x.0];
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::ShapeMismatch { op: "batch_norm", lhs: (n, c), rhs: (m.len(), v.len()) });
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if n == 0 {
                    return Err(Error::ShapeMismatch { op: "batch_norm", lhs: (n, c), rhs: (1, c) });
                }
                let mut mean = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for j in 0..c {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        let batch_stats = stats.is_some();
        let id = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })?;
        Ok((id, stats))
    }

    /// Sum of the `k` largest entries of `x` (any shape, read flat).
    ///
    /// The gradient is a 0/1 mask over the selected entries; see
    /// [`top_k_indices`] for the tie rule.
    pub fn top_k_sum(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let t = &self.values[x.0];
        if k == 0 || k > t.len() {
            return Err(Error::ShapeMismatch { op: "top_k_sum", lhs: t.shape(), rhs: (k, 1) });
        }
        let selected = top_k_indices(t.data(), k);
        let s = selected.iter().map(|&i| t.data()[i]).sum();
        self.push(Tensor::scalar(s), Op::TopKSum { x, selected })
    }

    /// Column `j` of `x` as an N×1 node.
    pub fn column(&mut self, x: NodeId, j: usize) -> Result<NodeId> {
        let t = &self.values[x.0];
        if j >= t.cols() {
            return Err(Error::ShapeMismatch { op: "column", lhs: t.shape(), rhs: (1, j) });
        }
        let v = Tensor::column(t.col(j));
        self.push(v, Op::Column(x, j))
    }

    /// Horizontal concatenation of equally tall nodes.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| &self.values[p.0]).collect();
        let v = Tensor::hstack(&refs)?;
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Runs the reverse pass from a scalar `loss`.
    ///
    /// Afterwards [`Graph::grad`] holds ∂loss/∂node for every node the
    /// loss depends on. A second call without [`Graph::zero_grad`] fails.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.values[loss.0].shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.visits = 0;
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            self.visits += 1;
            if !self.requires_grad[id] {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let op = std::mem::replace(&mut self.ops[id], Op::Constant);
            let res = self.propagate(id, &op, &g);
            self.ops[id] = op;
            self.grads[id] = Some(g);
            res?;
        }
        Ok(())
    }

    /// Gradients of every parameter leaf, zeros where unreached.
    pub fn param_grads(&self) -> Vec<(NodeId, Tensor)> {
        (0..self.len())
            .map(NodeId)
            .filter(|&id| self.is_param(id))
            .map(|id| (id, self.grad_or_zero(id)))
            .collect()
    }

    fn acc(&mut self, p: NodeId) -> Option<&mut Tensor> {
        if !self.requires_grad[p.0] {
            return None;
        }
        let (r, c) = self.values[p.0].shape();
        Some(self.grads[p.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    /// Accumulates `g[i]·local(i)` into operand `p`, reducing to a scalar
    /// when `p` was broadcast.
    fn acc_elementwise(&mut self, p: NodeId, g: &Tensor, local: impl Fn(usize) -> f64) {
        let broadcast = self.values[p.0].len() == 1 && g.len() != 1;
        let Some(dst) = self.acc(p) else { return };
        let gd = g.data();
        if broadcast {
            let s: f64 = gd.iter().enumerate().map(|(i, gv)| gv * local(i)).sum();
            dst.data_mut()[0] += s;
        } else {
            dst.data_mut().iter_mut().enumerate().for_each(|(i, d)| *d += gd[i] * local(i));
        }
    }

    fn propagate(&mut self, id: usize, op: &Op, g: &Tensor) -> Result<()> {
        for p in op.parents() {
            if p.0 >= id {
                return Err(Error::Cycle(id));
            }
        }
        let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
        match op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_elementwise(*a, g, |_| 1.0);
                self.acc_elementwise(*b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_elementwise(*a, g, |_| 1.0);
                self.acc_elementwise(*b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
                self.acc_elementwise(*a, g, |i| at(&vb, i));
                self.acc_elementwise(*b, g, |i| at(&va, i));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.values[a.0].clone(), self.values[b.0].clone());
                self.acc_elementwise(*a, g, |i| 1.0 / at(&vb, i));
                self.acc_elementwise(*b, g, |i| {
                    let d = at(&vb, i);
                    -at(&va, i) / (d * d)
                });
            }
            Op::MatMul(a, b) => {
                if self.requires_grad[a.0] {
                    let vb = std::mem::replace(&mut self.values[b.0], Tensor::zeros(0, 0));
                    if let Some(dst) = self.acc(*a) {
                        gemm_into(g, false, &vb, true, dst, 1.0);
                    }
                    self.values[b.0] = vb;
                }
                if self.requires_grad[b.0] {
                    let va = std::mem::replace(&mut self.values[a.0], Tensor::zeros(0, 0));
                    if let Some(dst) = self.acc(*b) {
                        gemm_into(&va, true, g, false, dst, 1.0);
                    }
                    self.values[a.0] = va;
                }
            }
            Op::Scale(a, c) => self.acc_elementwise(*a, g, |_| *c),
            Op::Shift(a) => self.acc_elementwise(*a, g, |_| 1.0),
            Op::Relu(a) => {
                let x = self.values[a.0].clone();
                self.acc_elementwise(*a, g, |i| if x.data()[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Tanh(a) => {
                let t = self.values[id].clone();
                self.acc_elementwise(*a, g, |i| 1.0 - t.data()[i] * t.data()[i]);
            }
            Op::Sigmoid(a) => {
                let s = self.values[id].clone();
                self.acc_elementwise(*a, g, |i| s.data()[i] * (1.0 - s.data()[i]));
            }
            Op::Exp(a) => {
                let e = self.values[id].clone();
                self.acc_elementwise(*a, g, |i| e.data()[i]);
            }
            Op::Log(a) => {
                let x = self.values[a.0].clone();
                self.acc_elementwise(*a, g, |i| 1.0 / x.data()[i]);
            }
            Op::Square(a) => {
                let x = self.values[a.0].clone();
                self.acc_elementwise(*a, g, |i| 2.0 * x.data()[i]);
            }
            Op::Sqrt(a) => {
                let r = self.values[id].clone();
                self.acc_elementwise(*a, g, |i| 0.5 / r.data()[i]);
            }
            Op::Softplus(a) => {
                let x = self.values[a.0].clone();
                self.acc_elementwise(*a, g, |i| sigmoid(x.data()[i]));
            }
            Op::Sum(a) => {
                let gv = g.item();
                if let Some(dst) = self.acc(*a) {
                    dst.data_mut().iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Mean(a) => {
                let gv = g.item() / self.values[a.0].len() as f64;
                if let Some(dst) = self.acc(*a) {
                    dst.data_mut().iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::AddRow(x, bias) => {
                let c = g.cols();
                if let Some(dst) = self.acc(*x) {
                    dst.data_mut().iter_mut().zip(g.data()).for_each(|(d, gv)| *d += gv);
                }
                if let Some(dst) = self.acc(*bias) {
                    for row in g.data().chunks(c.max(1)) {
                        dst.data_mut().iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c) = g.shape();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (grow, xrow) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                let gam = self.values[gamma.0].data().to_vec();
                if let Some(dst) = self.acc(*gamma) {
                    dst.data_mut().iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(dst) = self.acc(*beta) {
                    dst.data_mut().iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if let Some(dst) = self.acc(*x) {
                    let nf = n as f64;
                    for ((drow, grow), xrow) in dst.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(xhat.data().chunks(c)) {
                        for j in 0..c {
                            let scale = gam[j] * inv_std[j];
                            drow[j] += if *batch_stats {
                                scale * (grow[j] - sum_g[j] / nf - xrow[j] * sum_gx[j] / nf)
                            } else {
                                scale * grow[j]
                            };
                        }
                    }
                }
            }
            Op::TopKSum { x, selected } => {
                let gv = g.item();
                if let Some(dst) = self.acc(*x) {
                    for &i in selected {
                        dst.data_mut()[i] += gv;
                    }
                }
            }
            Op::Column(x, j) => {
                if let Some(dst) = self.acc(*x) {
                    let c = dst.cols();
                    for (r, gv) in g.data().iter().enumerate() {
                        dst.data_mut()[r * c + j] += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.values[p.0].cols();
                    if let Some(dst) = self.acc(*p) {
                        for (r, drow) in dst.data_mut().chunks_mut(pc.max(1)).enumerate() {
                            for (j, d) in drow.iter_mut().enumerate() {
                                *d += g.data()[r * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
        }
        Ok(())
    }
}

/// Compares autodiff gradients of `f` against central finite differences.
///
/// `f` receives a fresh graph and one parameter node per tensor in `point`
/// and must return a scalar loss node. Returns the maximum over all
/// coordinates of `|autodiff − fd| / max(1, |fd|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids = tensors.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &ids)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check", node: loss.0 });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids = point.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad_or_zero(id)).collect();

    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..probe.len() {
        for i in 0..probe[t].len() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic[t].data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
