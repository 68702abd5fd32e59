//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! operands. [`Tape::backward`] replays the record in reverse from a scalar
//! seed. Nodes that do not depend on a differentiable leaf are never visited.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    LeakyRelu(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Biased (divide-by-N) variance.
    Var,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    MatMul(Var, Var),
    Reduce { x: Var, op: ReduceOp, axes: Vec<usize> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Take(Var, Vec<usize>),
    LogSoftmax(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients from one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or an error if `v` was not differentiable.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v)
            .ok_or_else(|| Error::State(format!("no gradient recorded for node {}", v.0)))
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need = |b: Option<Var>| b.ok_or_else(|| Error::Numeric(format!("{op:?} needs two operands")));
        match op {
            ElementwiseOp::Add => self.add(a, need(b)?),
            ElementwiseOp::Sub => self.sub(a, need(b)?),
            ElementwiseOp::Mul => self.mul(a, need(b)?),
            ElementwiseOp::Div => self.div(a, need(b)?),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseOp::LeakyRelu(slope) => Ok(self.leaky_relu(a, slope)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).div(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).scale(c);
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t + c);
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { slope * t });
        self.unary(x, v, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&t| t <= 0.0) {
            return Err(Error::Numeric("logarithm of a non-positive value".into()));
        }
        let v = self.value(x).map(f64::ln);
        Ok(self.unary(x, v, Op::Ln(x)))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&t| t < 0.0) {
            return Err(Error::Numeric("square root of a negative value".into()));
        }
        let v = self.value(x).map(f64::sqrt);
        Ok(self.unary(x, v, Op::Sqrt(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t * t);
        self.unary(x, v, Op::Square(x))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|t| t.max(floor));
        self.unary(x, v, Op::ClampMin(x, floor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::dim("transpose", self.value(x).shape(), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(perm)?;
        Ok(self.unary(x, v, Op::Permute(x, perm.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.unary(x, v, Op::Reshape(x)))
    }

    /// Reduction over `axes`, which are removed from the result shape.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let kept = self.reduce_keepdim(op, x, axes)?;
        let shape: Vec<usize> = self
            .value(x)
            .shape()
            .iter()
            .enumerate()
            .filter(|(k, _)| !axes.contains(k))
            .map(|(_, &e)| e)
            .collect();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        self.reshape(kept, &shape)
    }

    /// Reduction over `axes`, which are kept as unit extents.
    pub fn reduce_keepdim(&mut self, op: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || axes.iter().any(|&a| a >= xs.len()) {
            return Err(Error::dim("reduce", &xs, axes));
        }
        let count: usize = axes.iter().map(|&a| xs[a]).product();
        if count == 0 {
            return Err(Error::Numeric(format!("empty reduction over axes {axes:?} of {xs:?}")));
        }
        let x_val = self.value(x);
        let sum = x_val.sum_axes_keepdim(axes)?;
        let v = match op {
            ReduceOp::Sum => sum,
            ReduceOp::Mean => sum.scale(1.0 / count as f64),
            ReduceOp::Var => {
                let mean = sum.scale(1.0 / count as f64);
                let centered = x_val.sub(&mean)?;
                centered.map(|t| t * t).sum_axes_keepdim(axes)?.scale(1.0 / count as f64)
            }
        };
        Ok(self.unary(
            x,
            v,
            Op::Reduce {
                x,
                op,
                axes: axes.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axes)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceOp::Sum, x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceOp::Mean, x, &axes)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(idx)?;
        Ok(self.unary(x, v, Op::GatherRows(x, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Picks elements by flat row-major index into a rank-1 result.
    pub fn take(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            match xv.data().get(i) {
                Some(&t) => data.push(t),
                None => return Err(Error::dim("take", xv.shape(), &[i])),
            }
        }
        let v = Tensor::vector(data);
        Ok(self.unary(x, v, Op::Take(x, flat.to_vec())))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("log_softmax", xv.shape(), &[2]));
        }
        let c = xv.shape()[1];
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|t| t - lse));
        }
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.unary(x, v, Op::LogSoftmax(x)))
    }

    /// Backpropagates from a one-element `loss`.
    ///
    /// Every differentiable leaf receives exactly one accumulated gradient of
    /// its own shape, zero when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(Error::dim("backward seed", seed.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(seed.shape()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.add(&d)?,
                slot @ None => *slot = Some(d),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.reduce_to(val(*a).shape())?)?;
                acc(*b, g.reduce_to(val(*b).shape())?)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.reduce_to(val(*a).shape())?)?;
                acc(*b, g.scale(-1.0).reduce_to(val(*b).shape())?)?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(*b))?.reduce_to(val(*a).shape())?)?;
                acc(*b, g.mul(val(*a))?.reduce_to(val(*b).shape())?)?;
            }
            Op::Div(a, b) => {
                acc(*a, g.div(val(*b))?.reduce_to(val(*a).shape())?)?;
                let db = g
                    .mul(&node.value)?
                    .zip_with(val(*b), "div backward", |t, bv| -t / bv)?;
                acc(*b, db.reduce_to(val(*b).shape())?)?;
            }
            Op::Scale(x, c) => acc(*x, g.scale(*c))?,
            Op::AddScalar(x) => acc(*x, g.clone())?,
            Op::Sigmoid(x) => acc(*x, g.zip_with(&node.value, "sigmoid backward", |t, s| t * s * (1.0 - s))?)?,
            Op::LeakyRelu(x, slope) => {
                let slope = *slope;
                acc(*x, g.zip_with(val(*x), "leaky_relu backward", |t, xv| if xv > 0.0 { t } else { t * slope })?)?
            }
            Op::Exp(x) => acc(*x, g.mul(&node.value)?)?,
            Op::Ln(x) => acc(*x, g.div(val(*x))?)?,
            Op::Sqrt(x) => acc(*x, g.zip_with(&node.value, "sqrt backward", |t, s| t / (2.0 * s))?)?,
            Op::Square(x) => acc(*x, g.zip_with(val(*x), "square backward", |t, xv| 2.0 * t * xv)?)?,
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                acc(*x, g.zip_with(val(*x), "clamp backward", |t, xv| if xv > floor { t } else { 0.0 })?)?
            }
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(*b).transpose()?)?)?;
                acc(*b, val(*a).transpose()?.matmul(g)?)?;
            }
            Op::Reduce { x, op, axes } => {
                let xs = val(*x).shape();
                let count: usize = axes.iter().map(|&a| xs[a]).product();
                let gb = g.broadcast_to(xs)?;
                let d = match op {
                    ReduceOp::Sum => gb,
                    ReduceOp::Mean => gb.scale(1.0 / count as f64),
                    ReduceOp::Var => {
                        let mean = val(*x).sum_axes_keepdim(axes)?.scale(1.0 / count as f64);
                        let centered = val(*x).sub(&mean)?;
                        let k = 2.0 / count as f64;
                        gb.zip_with(&centered, "var backward", |t, c| k * t * c)?
                    }
                };
                acc(*x, d)?;
            }
            Op::Reshape(x) => acc(*x, g.reshape(val(*x).shape())?)?,
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                acc(*x, g.permute(&inv)?)?;
            }
            Op::GatherRows(x, idx) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                let dd = d.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..c {
                        dd[i * c + k] += g.data()[r * c + k];
                    }
                }
                acc(*x, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let n = val(p).numel();
                    let d = Tensor::new(shape.to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    acc(p, d)?;
                }
            }
            Op::Take(x, flat) => {
                let mut d = Tensor::zeros(val(*x).shape());
                let dd = d.data_mut();
                for (r, &i) in flat.iter().enumerate() {
                    dd[i] += g.data()[r];
                }
                acc(*x, d)?;
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.numel());
                for (grow, orow) in g.data().chunks(c).zip(node.value.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(orow).map(|(gi, oi)| gi - oi.exp() * s));
                }
                acc(*x, Tensor::new(node.value.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 1.0]));
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        // 1 / (1 + e^-1)
        let oracle = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((t.value(s).data()[1] - oracle).abs() < 1e-15);
        assert!((t.value(s).data()[1] - 0.7310585786).abs() < 1e-10);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(-1.0));
        let y = t.elementwise(ElementwiseOp::LeakyRelu(0.01), x, None).unwrap();
        assert_eq!(t.value(y).item(), -0.01);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 3.0]));
        let m = t.reduce(ReduceOp::Mean, x, &[0]).unwrap();
        let v = t.reduce(ReduceOp::Var, x, &[0]).unwrap();
        assert_eq!(t.value(m).item(), 2.0);
        assert_eq!(t.value(v).item(), 1.0);

        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let m = t.reduce(ReduceOp::Mean, x, &[0]).unwrap();
        assert_eq!(t.value(m).shape(), &[2]);
        assert_eq!(t.value(m).data(), &[2.0, 3.0]);
    }

    #[test]
    fn empty_reduction_is_numeric_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[0, 3]));
        assert!(matches!(t.reduce(ReduceOp::Mean, x, &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn div_by_zero_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(1.0));
        let b = t.constant(Tensor::scalar(0.0));
        assert!(matches!(t.elementwise(ElementwiseOp::Div, a, Some(b)), Err(Error::Numeric(_))));
    }

    #[test]
    fn matmul_gradients() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = t.param(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let l = t.sum_all(c).unwrap();
        let g = t.backward(l).unwrap();
        // d/da = 1·bᵀ: row sums of b
        assert_eq!(g.wrt(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        // d/db = aᵀ·1: column sums of a
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::zeros(&[3]));
        let l = t.sum_all(a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(b).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(3.0));
        let b = t.mul(a, a).unwrap();
        let c = t.add(b, a).unwrap();
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(a).unwrap().item(), 7.0);
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut t = Tape::new();
        let a = t.param(Tensor::zeros(&[2]));
        assert!(t.backward(a).is_err());
    }
}
