//! Define-by-run reverse-mode differentiation over whole tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Calling
//! [`Graph::backward`] on a one-element loss walks the record in reverse and
//! returns the accumulated [`Gradients`]. A fresh graph is built for every
//! forward pass, so noise masks can be resampled freely between steps.
//!
//! [`Graph::stop_gradient`] is the identity in the forward pass and blocks
//! all gradient flow into its argument. A graph built with
//! [`Graph::transparent`] treats it as a plain identity instead; the
//! gradient checker uses that to tell intentional truncation from errors.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, geom: ConvGeom },
    StopGradient(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Reduce { x: Var, mean: bool },
    Reshape(Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape: nodes in evaluation order, so every input precedes its consumers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    transparent: bool,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached the node (constants, truncated branches).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient, or zeros shaped like `like` when none reached the node.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `stop_gradient` nodes let gradients through.
    pub fn transparent() -> Self {
        Self {
            nodes: Vec::new(),
            transparent: true,
        }
    }

    pub fn is_transparent(&self) -> bool {
        self.transparent
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Elementwise `a ∘ b`; `b` may broadcast into `a` along size-1 axes.
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let strides = tensor::broadcast_strides(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; ad.len()];
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        tensor::for_each_broadcast(av.shape(), &strides, |ia, ib| out[ia] = f(ad[ia], bd[ib]));
        let value = Tensor::new(av.shape(), out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.needs(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (&[m, k], &[k2, n]) = (xv.shape(), wv.shape()) else {
            return Err(Error::shape(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {k} vs {k2}"
            )));
        }
        let value = Tensor::new(&[m, n], tensor::matmul_nn(xv.data(), wv.data(), m, k, n))?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(value, Op::MatMul(x, w), rg))
    }

    /// Cross-correlation of `[b, c_in, h, w]` with `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        let out = tensor::conv2d_forward(&geom, self.value(x).data(), self.value(k).data());
        let value = Tensor::new(&geom.out_shape(), out)?;
        let rg = self.needs(x) || self.needs(k);
        Ok(self.push(value, Op::Conv2d { x, k, geom }, rg))
    }

    /// Identity forward; contributes exactly zero gradient to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        let rg = self.transparent && self.needs(x);
        self.push(value, Op::StopGradient(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.needs(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.needs(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let value = xv.map(f64::sqrt);
        let rg = self.needs(x);
        Ok(self.push(value, Op::Sqrt(x), rg))
    }

    /// Mean over `axes`, keeping reduced axes with size 1.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    /// Sum over `axes`, keeping reduced axes with size 1.
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    /// Sum over every axis, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, false)
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut out_shape = xv.shape().to_vec();
        for (i, &a) in axes.iter().enumerate() {
            if a >= rank || axes[..i].contains(&a) {
                return Err(Error::shape(format!(
                    "invalid reduction axes {axes:?} for rank {rank}"
                )));
            }
            out_shape[a] = 1;
        }
        let count = xv.len() / out_shape.iter().product::<usize>().max(1);
        let strides = tensor::broadcast_strides(xv.shape(), &out_shape)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        let xd = xv.data();
        tensor::for_each_broadcast(xv.shape(), &strides, |ia, ib| out[ib] += xd[ia]);
        if mean {
            let inv = 1.0 / count as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reduce { x, mean }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits, stabilized by
    /// subtracting each row's maximum.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[b, k] = lv.shape() else {
            return Err(Error::shape(format!(
                "logits must be [batch, classes], got {:?}",
                lv.shape()
            )));
        };
        if labels.len() != b {
            return Err(Error::shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            for (j, &z) in row.iter().enumerate() {
                probs[i * k + j] = (z - max - log_denom).exp();
            }
            loss -= row[labels[i]] - max - log_denom;
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.needs(logits);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|d| Tensor::new(node.value.shape(), d).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut accumulate = |v: Var, delta: Vec<f64>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let strides = tensor::broadcast_strides(av.shape(), bv.shape())
                    .expect("checked in forward");
                let (ad, bd) = (av.data(), bv.data());
                if self.needs(*a) {
                    let da = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => {
                            let mut da = vec![0.0; g.len()];
                            tensor::for_each_broadcast(av.shape(), &strides, |ia, ib| {
                                da[ia] = g[ia] * bd[ib]
                            });
                            da
                        }
                        BinaryOp::Div => {
                            let mut da = vec![0.0; g.len()];
                            tensor::for_each_broadcast(av.shape(), &strides, |ia, ib| {
                                da[ia] = g[ia] / bd[ib]
                            });
                            da
                        }
                    };
                    accumulate(*a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    tensor::for_each_broadcast(av.shape(), &strides, |ia, ib| {
                        db[ib] += match op {
                            BinaryOp::Add => g[ia],
                            BinaryOp::Sub => -g[ia],
                            BinaryOp::Mul => g[ia] * ad[ia],
                            BinaryOp::Div => -g[ia] * ad[ia] / (bd[ib] * bd[ib]),
                        }
                    });
                    accumulate(*b, db);
                }
            }
            Op::Scale(a, c) => accumulate(*a, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(*a, g.to_vec()),
            Op::StopGradient(a) => {
                // Only reachable on transparent graphs.
                accumulate(*a, g.to_vec())
            }
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.needs(*x) {
                    accumulate(*x, tensor::matmul_nt(g, wv.data(), m, n, k));
                }
                if self.needs(*w) {
                    accumulate(*w, tensor::matmul_tn(xv.data(), g, m, k, n));
                }
            }
            Op::Conv2d { x, k, geom } => {
                let (dx, dk) = tensor::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    g,
                    self.needs(*x),
                    self.needs(*k),
                );
                if let Some(dx) = dx {
                    accumulate(*x, dx);
                }
                if let Some(dk) = dk {
                    accumulate(*k, dk);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                // Subgradient at exactly 0 is 0.
                accumulate(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                accumulate(*a, g.iter().zip(av).map(|(gi, x)| 2.0 * x * gi).collect());
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                accumulate(*a, g.iter().zip(out).map(|(gi, y)| gi / (2.0 * y)).collect());
            }
            Op::Reduce { x, mean } => {
                let xv = self.value(*x);
                let strides = tensor::broadcast_strides(xv.shape(), node.value.shape())
                    .expect("checked in forward");
                let scale = if *mean {
                    node.value.len() as f64 / xv.len() as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; xv.len()];
                tensor::for_each_broadcast(xv.shape(), &strides, |ia, ib| dx[ia] = g[ib] * scale);
                accumulate(*x, dx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b.max(1);
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                accumulate(*logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v)
    }

    #[test]
    fn mul_broadcasts_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1.0, 2.0, 3.0]));
        let b = g.constant(Tensor::scalar(2.0));
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn add_zero_is_identity_with_unit_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[0.5, -1.0]));
        let z = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(z).is_none());
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3.0]));
        let b = g.leaf(t(&[5.0]));
        let c = g.mul(a, b).unwrap();
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[5.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn matmul_small_and_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let w = g.leaf(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
        let z = g.matmul(x, w).unwrap();
        assert_eq!(g.value(z).data(), &[3.0, 7.0]);
        let eye = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let y = g.matmul(x, eye).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(matches!(g.matmul(w, w), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_trivial_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = g.constant(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
        let k0 = g.constant(Tensor::zeros(&[3, 1, 2, 2]));
        let y0 = g.conv2d(x, k0, 1, 1).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
        assert!(matches!(g.conv2d(x, k, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn stop_gradient_semantics() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.5, -2.0]));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s).data(), &[1.5, -2.0]);
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x, g.value(x)).data(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[1.5, -2.0]));
        let s = g.stop_gradient(x);
        let y = g.add(x, s).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn transparent_graph_passes_gradient() {
        let mut g = Graph::transparent();
        let x = g.leaf(t(&[1.0]));
        let s = g.stop_gradient(x);
        let l = g.sum(s).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn relu_mean_square() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let l = g.sum(r).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let m = g.constant(Tensor::matrix(&[&[1.0, 3.0]]).unwrap());
        let mm = g.reduce_mean(m, &[0, 1]).unwrap();
        assert_eq!(g.value(mm).item().unwrap(), 2.0);
        assert!(matches!(g.reduce_mean(m, &[2]), Err(Error::Shape(_))));
        assert!(matches!(g.reduce_mean(m, &[1, 1]), Err(Error::Shape(_))));

        let mut g = Graph::new();
        let x = g.leaf(t(&[3.0]));
        let s = g.square(x);
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(&[&[0.0, 0.0]]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

        let z = g.leaf(Tensor::matrix(&[&[1000.0, 0.0]]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let v = g.value(l).item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);

        assert!(matches!(g.softmax_cross_entropy(z, &[2]), Err(Error::Data(_))));
    }
}
