//! Bias-free dense/conv pre-activations, the two batch-normalization forms
//! and the affine-plus-activation step that follows them.
//!
//! Batch statistics are per channel, over the batch axis for `[n, c]`
//! tensors and over batch and spatial axes jointly for `[n, c, h, w]`.
//! Variances are population (biased) variances.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `[fan_in, fan_out]`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl DenseParams {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::shape(format!(
                "dense weight must be [in, out], got {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight, bias: None })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[c_out, c_in, kh, kw]`.
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, stride: usize, pad: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(format!(
                "conv kernel must be [out, in, kh, kw], got {:?}",
                weight.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        Ok(Self { weight, stride, pad })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// A weight layer already placed on a graph.
#[derive(Clone, Copy, Debug)]
pub enum Linear {
    Dense(Var),
    Conv { weight: Var, stride: usize, pad: usize },
}

impl Linear {
    /// Pre-activation `z = x·W` (or the convolution), without bias.
    pub fn preact(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match *self {
            Linear::Dense(w) => dense_preact(g, x, w),
            Linear::Conv { weight, stride, pad } => g.conv2d(x, weight, stride, pad),
        }
    }

    pub fn weight(&self) -> Var {
        match *self {
            Linear::Dense(w) | Linear::Conv { weight: w, .. } => w,
        }
    }

    /// Same layer with its weight replaced.
    pub fn with_weight(&self, w: Var) -> Linear {
        match *self {
            Linear::Dense(_) => Linear::Dense(w),
            Linear::Conv { stride, pad, .. } => Linear::Conv {
                weight: w,
                stride,
                pad,
            },
        }
    }
}

pub fn dense_preact(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape(format!(
            "dense layer with weight {ws:?} cannot take input {xs:?}"
        )));
    }
    g.matmul(x, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BNParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BNParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running(&mut self, mean: &Tensor, var: &Tensor) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = m * *r + (1.0 - m) * b;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.beta, &self.running_mean, &self.running_var]
            .iter()
            .any(|t| t.len() != c)
        {
            return Err(Error::shape("batch-norm parameter lengths differ"));
        }
        if !(self.epsilon >= 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config(format!(
                "batch norm needs epsilon >= 0 and momentum in (0,1), got {} and {}",
                self.epsilon, self.momentum
            )));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("negative running variance".into()));
        }
        Ok(())
    }
}

/// Output of a train-mode normalization together with the batch statistics used.
#[derive(Clone, Copy, Debug)]
pub struct Normalized {
    pub out: Var,
    pub mean: Var,
    pub var: Var,
}

fn stat_axes(shape: &[usize]) -> Result<Vec<usize>> {
    match shape.len() {
        2 => Ok(vec![0]),
        4 => Ok(vec![0, 2, 3]),
        _ => Err(Error::shape(format!(
            "batch norm expects [n, c] or [n, c, h, w], got {shape:?}"
        ))),
    }
}

/// Shape that broadcasts a per-channel vector against `shape`.
pub(crate) fn channel_shape(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    if shape.len() >= 2 {
        s[1] = shape[1];
    }
    s
}

/// Per-channel batch statistics of `stats_from`, applied to `z`:
/// `(z − mean(stats_from)) / sqrt(var(stats_from) + eps)`.
pub fn normalize_by(g: &mut Graph, z: Var, stats_from: Var, eps: f64) -> Result<Normalized> {
    if g.shape(z) != g.shape(stats_from) {
        return Err(Error::shape(format!(
            "normalizing {:?} by statistics of {:?}",
            g.shape(z),
            g.shape(stats_from)
        )));
    }
    let shape = g.shape(stats_from).to_vec();
    if shape[0] < 2 {
        return Err(Error::contract(format!(
            "train-mode batch norm needs a batch of at least 2, got {}",
            shape[0]
        )));
    }
    let axes = stat_axes(&shape)?;
    let mean = g.reduce_mean(stats_from, &axes)?;
    let centered_s = g.sub(stats_from, mean)?;
    let sq = g.square(centered_s);
    let var = g.reduce_mean(sq, &axes)?;
    let var_eps = g.add_scalar(var, eps);
    let std = g.sqrt(var_eps)?;
    let centered = if z == stats_from {
        centered_s
    } else {
        g.sub(z, mean)?
    };
    let out = g.div(centered, std)?;
    Ok(Normalized { out, mean, var })
}

fn normalize_eval(g: &mut Graph, z: Var, bn: &BNParams) -> Result<Var> {
    let cs = channel_shape(g.shape(z));
    if cs.get(1).copied() != Some(bn.channels()) {
        return Err(Error::shape(format!(
            "batch norm over {} channels applied to {:?}",
            bn.channels(),
            g.shape(z)
        )));
    }
    if bn.running_var.data().iter().any(|&v| v + bn.epsilon <= 0.0) {
        return Err(Error::Numeric(
            "eval-mode batch norm with zero running variance and zero epsilon".into(),
        ));
    }
    let mean = g.constant(bn.running_mean.reshape(&cs)?);
    let std = g.constant(bn.running_var.map(|v| (v + bn.epsilon).sqrt()).reshape(&cs)?);
    let centered = g.sub(z, mean)?;
    g.div(centered, std)
}

/// Standard batch normalization without the affine step.
///
/// Train mode normalizes by batch statistics and folds them into the running
/// statistics; eval mode normalizes by the running statistics.
pub fn batchnorm_standard(g: &mut Graph, z: Var, bn: &mut BNParams, mode: Mode) -> Result<Var> {
    match mode {
        Mode::Train => {
            let n = normalize_by(g, z, z, bn.epsilon)?;
            let (m, v) = (g.value(n.mean).clone(), g.value(n.var).clone());
            bn.update_running(&m, &v);
            Ok(n.out)
        }
        Mode::Eval => normalize_eval(g, z, bn),
    }
}

/// Normalizes `z` with the batch statistics of its signal counterpart `zs`.
///
/// Running statistics are folded in from `z`, so eval mode (which uses
/// [`batchnorm_standard`]) sees the same distribution as training.
pub fn batchnorm_signal_stats(g: &mut Graph, z: Var, zs: Var, bn: &mut BNParams) -> Result<Var> {
    let n = normalize_by(g, z, zs, bn.epsilon)?;
    let axes = stat_axes(g.shape(z))?;
    let zv = g.value(z);
    let (mean, var) = batch_moments(zv, &axes);
    bn.update_running(&mean, &var);
    Ok(n.out)
}

// Plain per-channel mean and population variance, off the tape.
fn batch_moments(t: &Tensor, axes: &[usize]) -> (Tensor, Tensor) {
    let (c, spatial) = t.channel_layout().expect("checked by caller");
    debug_assert!(!axes.is_empty());
    let n = t.shape()[0];
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, chunk) in t.data().chunks(spatial).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for (i, chunk) in t.data().chunks(spatial).enumerate() {
        let m = mean[i % c];
        var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= count);
    (Tensor::vector(&mean), Tensor::vector(&var))
}

/// `φ(γ ⊙ ẑ + β)` with per-channel `γ`, `β` of shape `[c]`.
pub fn affine_activation(
    g: &mut Graph,
    zhat: Var,
    gamma: Var,
    beta: Var,
    phi: Activation,
) -> Result<Var> {
    let cs = channel_shape(g.shape(zhat));
    let c = cs.get(1).copied().unwrap_or(0);
    if g.value(gamma).len() != c || g.value(beta).len() != c {
        return Err(Error::shape(format!(
            "affine parameters of length {}/{} for {} channels",
            g.value(gamma).len(),
            g.value(beta).len(),
            c
        )));
    }
    let gm = g.reshape(gamma, &cs)?;
    let bt = g.reshape(beta, &cs)?;
    let scaled = g.mul(zhat, gm)?;
    let shifted = g.add(scaled, bt)?;
    Ok(match phi {
        Activation::Identity => shifted,
        Activation::Relu => g.relu(shifted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn dense_preact_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(&[&[1.0, 1.0]]).unwrap());
        let w = g.leaf(Tensor::matrix(&[&[2.0], &[3.0]]).unwrap());
        let z = dense_preact(&mut g, x, w).unwrap();
        assert_eq!(g.value(z).data(), &[5.0]);
        let w0 = g.leaf(Tensor::zeros(&[2, 3]));
        let z0 = dense_preact(&mut g, x, w0).unwrap();
        assert!(g.value(z0).data().iter().all(|&v| v == 0.0));
        let bad = g.leaf(Tensor::zeros(&[3, 1]));
        assert!(matches!(dense_preact(&mut g, x, bad), Err(Error::Shape(_))));
        let via_matmul = g.matmul(x, w).unwrap();
        assert_eq!(g.value(via_matmul), g.value(z));
    }

    #[test]
    fn batchnorm_symmetric_and_constant() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let mut bn = BNParams::new(1).with_epsilon(0.0);
        let y = batchnorm_standard(&mut g, z, &mut bn, Mode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let z = g.constant(Tensor::new(&[3, 1], vec![5.0; 3]).unwrap());
        let mut bn = BNParams::new(1);
        let y = batchnorm_standard(&mut g, z, &mut bn, Mode::Train).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_rejects_single_sample() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let mut bn = BNParams::new(2);
        assert!(matches!(
            batchnorm_standard(&mut g, z, &mut bn, Mode::Train),
            Err(Error::Contract(_))
        ));
        // eval mode has no batch requirement
        assert!(batchnorm_standard(&mut g, z, &mut bn, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_zero_variance_without_epsilon_is_numeric_error() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let mut bn = BNParams::new(1).with_epsilon(0.0);
        bn.running_var = Tensor::zeros(&[1]);
        assert!(matches!(
            batchnorm_standard(&mut g, z, &mut bn, Mode::Eval),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn batchnorm_random_batch_statistics() {
        // Inputs spread over [-10, 10] so eps = 1e-5 shrinks the variance by < 1e-6.
        let zt = random(&[64, 8], 3).map(|v| 5.0 * v);
        let mut g = Graph::new();
        let z = g.constant(zt.clone());
        let mut bn = BNParams::new(8);
        let y = batchnorm_standard(&mut g, z, &mut bn, Mode::Train).unwrap();
        let yv = g.value(y);
        let column = |t: &Tensor, c: usize| -> Vec<f64> { (0..64).map(|i| t.data()[i * 8 + c]).collect() };
        let moments = |col: &[f64]| {
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            (mean, var)
        };
        for c in 0..8 {
            let (mean, var) = moments(&column(yv, c));
            let (_, raw_var) = moments(&column(&zt, c));
            assert!(mean.abs() < 1e-10);
            assert!(var <= 1.0 && var >= 1.0 - 1e-6, "var {var}");
            assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-12);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap());
        let mut bn = BNParams::new(1);
        batchnorm_standard(&mut g, z, &mut bn, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.1 * 2.0).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn signal_stats_examples() {
        let mut g = Graph::new();
        let zs = g.constant(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
        let z = g.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let mut bn = BNParams::new(1).with_epsilon(0.0);
        let y = batchnorm_signal_stats(&mut g, z, zs, &mut bn).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        // running stats come from z: mean 1, var 0
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 0.9).abs() < 1e-15);

        let z = g.constant(Tensor::new(&[2, 1], vec![2.0, 0.0]).unwrap());
        let y = batchnorm_signal_stats(&mut g, z, zs, &mut bn).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);

        let other = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            batchnorm_signal_stats(&mut g, other, zs, &mut bn),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn signal_stats_of_itself_is_standard() {
        let t = random(&[6, 3, 2, 2], 9);
        let mut g = Graph::new();
        let z = g.leaf(t.clone());
        let a = batchnorm_standard(&mut g, z, &mut BNParams::new(3), Mode::Train).unwrap();
        let b = batchnorm_signal_stats(&mut g, z, z, &mut BNParams::new(3)).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let zhat = g.leaf(Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap());
        let one = g.leaf(Tensor::ones(&[1]));
        let zero = g.leaf(Tensor::zeros(&[1]));
        let id = affine_activation(&mut g, zhat, one, zero, Activation::Identity).unwrap();
        assert_eq!(g.value(id), g.value(zhat));

        let two = g.leaf(Tensor::full(&[1], 2.0));
        let y = affine_activation(&mut g, zhat, two, one, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);

        let mut g = Graph::new();
        let zhat = g.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
        let gamma = g.leaf(Tensor::ones(&[1]));
        let beta = g.leaf(Tensor::zeros(&[1]));
        let y = affine_activation(&mut g, zhat, gamma, beta, Activation::Identity).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(gamma).unwrap().data(), &[3.0]);
    }

    #[test]
    fn mean_square_of_normalized_batch_has_no_gradient() {
        for seed in 0..5 {
            let mut g = Graph::new();
            let z = g.leaf(random(&[16, 4], seed));
            let mut bn = BNParams::new(4).with_epsilon(0.0);
            let zhat = batchnorm_standard(&mut g, z, &mut bn, Mode::Train).unwrap();
            let sq = g.square(zhat);
            let s = g.reduce_mean(sq, &[0, 1]).unwrap();
            let grads = g.backward(s).unwrap();
            let gz = grads.get(z).unwrap();
            let worst = gz.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-8, "seed {seed}: {worst}");
        }
    }
}
