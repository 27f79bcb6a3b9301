//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Define-by-run: a [`Tape`] is created per forward pass, ops append nodes
//! in topological order, and [`Tape::backward`] consumes the tape in one
//! reverse sweep. There is no broadcasting; shape alignment is explicit
//! via `expand_rows` / `reshape`. Any non-finite value or gradient aborts
//! with an error naming the producing op.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { slot: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat { a: Var, b: Var, axis: usize },
    Slice { input: Var, axis: usize, start: usize, len: usize },
    Transpose(Var),
    Scale { input: Var, factor: f64 },
    ExpandRows { input: Var, n: usize },
    Reshape(Var),
    L2Normalize { input: Var, axis: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(..) => "transpose",
            Op::Scale { .. } => "scale",
            Op::ExpandRows { .. } => "expand_rows",
            Op::Reshape(..) => "reshape",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients returned by [`Tape::backward`], keyed by leaf handle and,
/// for parameter leaves, by parameter slot.
pub struct Gradients {
    by_var: BTreeMap<usize, Tensor>,
    slot_to_var: BTreeMap<usize, usize>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v.0)
    }

    pub fn of_slot(&self, slot: usize) -> Option<&Tensor> {
        self.slot_to_var.get(&slot).and_then(|v| self.by_var.get(v))
    }

    pub fn slot_mut(&mut self, slot: usize) -> Option<&mut Tensor> {
        let var = *self.slot_to_var.get(&slot)?;
        self.by_var.get_mut(&var)
    }

    pub fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slot_to_var.keys().copied()
    }
}

/// Wengert list recording one forward pass.
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf: participates in values, never receives gradient.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, false, Op::Leaf { slot: None })
    }

    /// Grad-flagged leaf.
    pub fn leaf_grad(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, true, Op::Leaf { slot: None })
    }

    /// Parameter leaf identified by a stable slot index.
    pub fn param(&mut self, slot: usize, t: Tensor, trainable: bool) -> Result<Var> {
        self.push(t, trainable, Op::Leaf { slot: Some(slot) })
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(id))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(&[m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::MatMul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| scalar::exp(x)).collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| scalar::ln(x)).collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Log(a))
    }

    /// Sum of all elements, scalar result.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Mean of all elements, scalar result.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::EmptySet("mean input"));
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != tb.ndim() || axis >= ta.ndim() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!("{:?} ++ {:?} along {axis}", ta.shape(), tb.shape()),
            });
        }
        for (d, (&x, &y)) in ta.shape().iter().zip(tb.shape()).enumerate() {
            if d != axis && x != y {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} ++ {:?} along {axis}", ta.shape(), tb.shape()),
                });
            }
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] += tb.shape()[axis];
        let outer: usize = ta.shape()[..axis].iter().product();
        let inner: usize = ta.shape()[axis + 1..].iter().product();
        let block_a = ta.shape()[axis] * inner;
        let block_b = tb.shape()[axis] * inner;
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            data.extend_from_slice(&ta.data()[o * block_a..(o + 1) * block_a]);
            data.extend_from_slice(&tb.data()[o * block_b..(o + 1) * block_b]);
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, Op::Concat { a, b, axis })
    }

    /// Contiguous range [start, end) along one axis.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.ndim() || start >= end || end > ta.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {end}) along {axis} of {:?}", ta.shape()),
            });
        }
        let len = end - start;
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let outer: usize = ta.shape()[..axis].iter().product();
        let inner: usize = ta.shape()[axis + 1..].iter().product();
        let src_block = ta.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Slice { input: a, axis, start, len })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", ta.shape()),
            });
        }
        let (m, n) = (ta.rows(), ta.cols());
        let t = Tensor::new(&[n, m], transpose_data(ta.data(), m, n))?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Transpose(a))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let data = self.value(a).data().iter().map(|&x| factor * x).collect();
        let t = Tensor::new(self.value(a).shape(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale { input: a, factor })
    }

    /// Repeat a length-d vector as n identical rows: [d] -> [n, d].
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_rows",
                detail: format!("expected rank 1, got {:?}", ta.shape()),
            });
        }
        let d = ta.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(ta.data());
        }
        let t = Tensor::new(&[n, d], data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::ExpandRows { input: a, n })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let expect: usize = shape.iter().product();
        if expect != ta.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", ta.shape()),
            });
        }
        let t = Tensor::new(shape, ta.data().to_vec())?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Reshape(a))
    }

    /// x / |x| along `axis`, with the exact Jacobian as gradient rule.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.ndim().max(1) {
            return Err(Error::ShapeMismatch {
                op: "l2_normalize",
                detail: format!("axis {axis} of {:?}", ta.shape()),
            });
        }
        let mut data = ta.data().to_vec();
        for_each_lane(ta.shape(), axis, |lane| {
            let norm = scalar::sqrt(lane.iter().map(|&i| data[i] * data[i]).sum::<f64>());
            if norm <= 0.0 {
                return Err(Error::ZeroNorm { op: "l2_normalize" });
            }
            for &i in lane {
                data[i] /= norm;
            }
            Ok(())
        })?;
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::L2Normalize { input: a, axis })
    }

    /// Mean over rows of -log softmax(logits)[label], max-stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.ndim() != 2 || tl.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {:?} vs {} labels", tl.shape(), labels.len()),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptySet("softmax_cross_entropy batch"));
        }
        let classes = tl.cols();
        for &y in labels {
            if y >= classes {
                return Err(Error::InvalidLabel { label: y, classes });
            }
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = tl.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scalar::ln(row.iter().map(|&v| scalar::exp(v - m)).sum::<f64>());
            total += lse - row[y];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / labels.len() as f64),
            rg,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
        )
    }

    /// Reverse sweep from a scalar loss. Consumes the tape; gradients are
    /// returned for every grad-flagged leaf (zero where unreachable).
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let node = self.nodes.get(loss.0).ok_or(Error::DetachedLoss)?;
        if node.value.numel() != 1 {
            return Err(Error::NonScalarLoss);
        }
        if !node.requires_grad {
            return Err(Error::DetachedLoss);
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf { .. }) {
                grads[idx] = Some(g);
            }
        }

        let mut by_var = BTreeMap::new();
        let mut slot_to_var = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { slot } = node.op {
                if node.requires_grad {
                    let data = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    by_var.insert(idx, Tensor::new(node.value.shape(), data)?);
                    if let Some(s) = slot {
                        slot_to_var.insert(s, idx);
                    }
                }
            }
        }
        Ok(Gradients { by_var, slot_to_var })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let name = node.op.name();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec(), name, grads)?;
                self.accumulate(*b, g.to_vec(), name, grads)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.to_vec(), name, grads)?;
                self.accumulate(*b, g.iter().map(|&v| -v).collect(), name, grads)?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = g.iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect();
                let db = g.iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(*a, da, name, grads)?;
                self.accumulate(*b, db, name, grads)?;
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let da = matmul_nt(g, tb.data(), m, n, k);
                let db = matmul_tn(ta.data(), g, m, k, n);
                self.accumulate(*a, da, name, grads)?;
                self.accumulate(*b, db, name, grads)?;
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da = g
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, da, name, grads)?;
            }
            Op::Exp(a) => {
                let y = &node.value;
                let da = g.iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                self.accumulate(*a, da, name, grads)?;
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                let da = g.iter().zip(ta.data()).map(|(&gv, &x)| gv / x).collect();
                self.accumulate(*a, da, name, grads)?;
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![g[0]; n], name, grads)?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.accumulate(*a, vec![g[0] / n as f64; n], name, grads)?;
            }
            Op::Concat { a, b, axis } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let outer: usize = ta.shape()[..*axis].iter().product();
                let inner: usize = ta.shape()[*axis + 1..].iter().product();
                let block_a = ta.shape()[*axis] * inner;
                let block_b = tb.shape()[*axis] * inner;
                let mut da = Vec::with_capacity(ta.numel());
                let mut db = Vec::with_capacity(tb.numel());
                for o in 0..outer {
                    let base = o * (block_a + block_b);
                    da.extend_from_slice(&g[base..base + block_a]);
                    db.extend_from_slice(&g[base + block_a..base + block_a + block_b]);
                }
                self.accumulate(*a, da, name, grads)?;
                self.accumulate(*b, db, name, grads)?;
            }
            Op::Slice { input, axis, start, len } => {
                let ti = self.value(*input);
                let outer: usize = ti.shape()[..*axis].iter().product();
                let inner: usize = ti.shape()[*axis + 1..].iter().product();
                let src_block = ti.shape()[*axis] * inner;
                let mut di = vec![0.0; ti.numel()];
                for o in 0..outer {
                    let dst = o * src_block + start * inner;
                    let src = o * len * inner;
                    di[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(*input, di, name, grads)?;
            }
            Op::Transpose(a) => {
                let ta = self.value(*a);
                let (m, n) = (ta.rows(), ta.cols());
                // output is [n, m]; transpose g back to [m, n]
                self.accumulate(*a, transpose_data(g, n, m), name, grads)?;
            }
            Op::Scale { input, factor } => {
                let da = g.iter().map(|&v| factor * v).collect();
                self.accumulate(*input, da, name, grads)?;
            }
            Op::ExpandRows { input, n } => {
                let d = self.value(*input).numel();
                let mut da = vec![0.0; d];
                for r in 0..*n {
                    for c in 0..d {
                        da[c] += g[r * d + c];
                    }
                }
                self.accumulate(*input, da, name, grads)?;
            }
            Op::Reshape(a) => {
                self.accumulate(*a, g.to_vec(), name, grads)?;
            }
            Op::L2Normalize { input, axis } => {
                let x = self.value(*input);
                let y = &node.value;
                let mut da = vec![0.0; x.numel()];
                for_each_lane(x.shape(), *axis, |lane| {
                    let norm =
                        scalar::sqrt(lane.iter().map(|&i| x.data()[i] * x.data()[i]).sum::<f64>());
                    let dot: f64 = lane.iter().map(|&i| y.data()[i] * g[i]).sum();
                    for &i in lane {
                        da[i] = (g[i] - y.data()[i] * dot) / norm;
                    }
                    Ok(())
                })?;
                self.accumulate(*input, da, name, grads)?;
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let tl = self.value(*logits);
                let (n, c) = (tl.rows(), tl.cols());
                let scale = g[0] / n as f64;
                let mut dl = vec![0.0; n * c];
                for (i, &y) in labels.iter().enumerate() {
                    let row = tl.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| scalar::exp(v - m)).sum();
                    for j in 0..c {
                        let p = scalar::exp(row[j] - m) / denom;
                        dl[i * c + j] = scale * (p - if j == y { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(*logits, dl, name, grads)?;
            }
        }
        Ok(())
    }

    fn accumulate(
        &self,
        target: Var,
        contribution: Vec<f64>,
        op: &'static str,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        if contribution.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&contribution) {
                    *a += c;
                }
            }
            slot => *slot = Some(contribution),
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose_data(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

/// C[m,n] = A[m,k] @ B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let row = &b[l * n..(l + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in dst.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,k] = G[m,n] @ B[k,n]^T
fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            let mut s = 0.0;
            for l in 0..n {
                s += g[i * n + l] * b[j * n + l];
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// C[k,n] = A[m,k]^T @ G[m,n]
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for l in 0..m {
        for i in 0..k {
            let av = a[l * k + i];
            if av == 0.0 {
                continue;
            }
            let row = &g[l * n..(l + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (o, &gv) in dst.iter_mut().zip(row) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Visit index lanes along `axis` of `shape`. Each lane is the list of flat
/// indices obtained by varying the axis coordinate with all others fixed.
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if shape.is_empty() {
        return f(&[0]);
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut lane = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = o * len * inner + k * inner + i;
            }
            f(&lane)?;
        }
    }
    Ok(())
}
