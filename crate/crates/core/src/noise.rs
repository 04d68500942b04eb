//! Multiplicative noise and its non-correlating variants.
//!
//! Every mask `u` has `E[u] = 1`; the zero-mean part `v = u − 1` is what the
//! non-correlating variants route through [`Graph::stop_gradient`], so the
//! noise shows up in the forward value but never in the gradient.

use std::collections::{HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Activation, BNParams, DenseParams, Linear, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `u ~ U[1 − σ√3, 1 + σ√3]`.
    Uniform,
    /// `u ~ N(1, σ²)`.
    Gaussian,
    /// `u = m / p` with `m ~ Bernoulli(p)`.
    BernoulliDropout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation of `u` for the uniform and gaussian kinds.
    pub sigma: f64,
    /// Keep probability for dropout.
    pub keep_prob: f64,
    /// One mask value per (sample, channel) instead of per activation.
    pub share_spatial: bool,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Uniform,
            sigma: 0.0,
            keep_prob: 1.0,
            share_spatial: true,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn uniform(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::default()
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma,
            ..Self::default()
        }
    }

    pub fn dropout(keep_prob: f64) -> Self {
        Self {
            kind: NoiseKind::BernoulliDropout,
            keep_prob,
            ..Self::default()
        }
    }

    pub fn per_activation(mut self) -> Self {
        self.share_spatial = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Uniform | NoiseKind::Gaussian if !(self.sigma >= 0.0) || !self.sigma.is_finite() => {
                Err(Error::config(format!("noise sigma must satisfy sigma >= 0, got {}", self.sigma)))
            }
            NoiseKind::BernoulliDropout if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) => {
                Err(Error::config(format!(
                    "dropout keep probability must lie in (0, 1], got {}",
                    self.keep_prob
                )))
            }
            _ => Ok(()),
        }
    }

    /// `Var[u]`.
    pub fn variance(&self) -> f64 {
        match self.kind {
            NoiseKind::Uniform | NoiseKind::Gaussian => self.sigma * self.sigma,
            NoiseKind::BernoulliDropout => (1.0 - self.keep_prob) / self.keep_prob,
        }
    }

    /// True when every mask this spec can produce is exactly 1.
    pub fn is_noiseless(&self) -> bool {
        match self.kind {
            NoiseKind::Uniform | NoiseKind::Gaussian => self.sigma == 0.0,
            NoiseKind::BernoulliDropout => self.keep_prob == 1.0,
        }
    }

    /// Shape of the stored mask for an activation of `shape`: `[n, c, 1, 1]`
    /// when shared across spatial positions, otherwise `shape` itself.
    pub fn mask_shape(&self, shape: &[usize]) -> Result<Vec<usize>> {
        if !self.share_spatial {
            return Ok(shape.to_vec());
        }
        if shape.len() < 3 {
            return Err(Error::config(format!(
                "spatially shared masks need spatial axes, got shape {shape:?}"
            )));
        }
        let mut s = shape.to_vec();
        s[2..].iter_mut().for_each(|d| *d = 1);
        Ok(s)
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::Uniform => {
                let half_width = self.sigma * 3f64.sqrt();
                1.0 + half_width * (2.0 * rng.random::<f64>() - 1.0)
            }
            NoiseKind::Gaussian => {
                let n: f64 = rng.sample(StandardNormal);
                1.0 + self.sigma * n
            }
            NoiseKind::BernoulliDropout => {
                if rng.random::<f64>() < self.keep_prob {
                    1.0 / self.keep_prob
                } else {
                    0.0
                }
            }
        }
    }
}

/// Draws a mask for an activation of `shape` (see [`NoiseSpec::mask_shape`]).
pub fn sample_mask<R: Rng + ?Sized>(spec: &NoiseSpec, shape: &[usize], rng: &mut R) -> Result<Tensor> {
    spec.validate()?;
    let ms = spec.mask_shape(shape)?;
    let n = ms.iter().product();
    Tensor::new(&ms, (0..n).map(|_| spec.draw(rng)).collect())
}

/// Where masks and mixing weights come from: a seeded generator during
/// training, or a fixed script in tests.
pub trait NoiseSource {
    fn mask(&mut self, spec: &NoiseSpec, shape: &[usize]) -> Result<Tensor>;

    /// Independent `U[0, 1)` draws of the given shape.
    fn unit_uniform(&mut self, shape: &[usize]) -> Result<Tensor>;
}

/// Counter-based per-run generator (ChaCha8).
#[derive(Clone, Debug)]
pub struct NoiseRng(ChaCha8Rng);

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self(rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }
}

impl NoiseSource for NoiseRng {
    fn mask(&mut self, spec: &NoiseSpec, shape: &[usize]) -> Result<Tensor> {
        sample_mask(spec, shape, &mut self.0)
    }

    fn unit_uniform(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.0.random::<f64>()).collect())
    }
}

/// Replays a fixed sequence of tensors, checking each one's shape.
#[derive(Clone, Debug, Default)]
pub struct Scripted {
    queue: VecDeque<Tensor>,
}

impl Scripted {
    pub fn new(tensors: impl IntoIterator<Item = Tensor>) -> Self {
        Self {
            queue: tensors.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }

    fn next(&mut self, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .queue
            .pop_front()
            .ok_or_else(|| Error::contract("scripted noise source exhausted"))?;
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "scripted tensor has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

impl NoiseSource for Scripted {
    fn mask(&mut self, spec: &NoiseSpec, shape: &[usize]) -> Result<Tensor> {
        let ms = spec.mask_shape(shape)?;
        self.next(&ms)
    }

    fn unit_uniform(&mut self, shape: &[usize]) -> Result<Tensor> {
        self.next(shape)
    }
}

/// `x̃ = u ⊙ x` in training, identity in eval.
pub fn apply_mn(
    g: &mut Graph,
    x: Var,
    spec: &NoiseSpec,
    src: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<Var> {
    if mode == Mode::Eval {
        return Ok(x);
    }
    let u = src.mask(spec, g.shape(x))?;
    let u = g.constant(u);
    g.mul(x, u)
}

/// DropConnect-style noise on a weight already on the graph: one
/// independent mask entry per weight, resampled per forward pass.
pub fn weight_noise(
    g: &mut Graph,
    w: Var,
    spec: &NoiseSpec,
    src: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<Var> {
    if mode == Mode::Eval {
        return Ok(w);
    }
    let per_weight = spec.clone().per_activation();
    let u = src.mask(&per_weight, g.shape(w))?;
    let u = g.constant(u);
    g.mul(w, u)
}

/// Off-graph weight noise: `w̃_ij = u_ij · w_ij`.
pub fn apply_weight_noise<R: Rng + ?Sized>(
    p: &DenseParams,
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<DenseParams> {
    let per_weight = spec.clone().per_activation();
    let u = sample_mask(&per_weight, p.weight.shape(), rng)?;
    let data = p.weight.data().iter().zip(u.data()).map(|(w, u)| w * u).collect();
    Ok(DenseParams {
        weight: Tensor::new(p.weight.shape(), data)?,
        bias: p.bias.clone(),
    })
}

/// NCMN-0: `ẑ' = ẑs + sg(v ⊙ ẑs)` with `ẑs = BN(Ψ(x))`, `v = u − 1`.
pub fn ncmn0_layer(
    g: &mut Graph,
    x: Var,
    linear: Linear,
    bn: &mut BNParams,
    spec: &NoiseSpec,
    src: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<Var> {
    let z = linear.preact(g, x)?;
    let zhat = layers::batchnorm_standard(g, z, bn, mode)?;
    if mode == Mode::Eval {
        return Ok(zhat);
    }
    let v = src.mask(spec, g.shape(zhat))?.map(|u| u - 1.0);
    let v = g.constant(v);
    let noise = g.mul(zhat, v)?;
    let noise = g.stop_gradient(noise);
    g.add(zhat, noise)
}

/// NCMN-1 with the standard-BN form:
/// `ẑ' = BN(zs) + sg(BN(z) − BN(zs))`, `zs = Ψ(x)`, `z = Ψ(u ⊙ x)`.
///
/// The forward value is `BN(z)`; the gradient flows through `BN(zs)` only.
/// Running statistics are taken from `z`.
pub fn ncmn1_layer(
    g: &mut Graph,
    x: Var,
    linear: Linear,
    bn: &mut BNParams,
    spec: &NoiseSpec,
    src: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Eval => {
            let zs = linear.preact(g, x)?;
            layers::batchnorm_standard(g, zs, bn, Mode::Eval)
        }
        Mode::Train => {
            let u = src.mask(spec, g.shape(x))?;
            ncmn1_with_mask(g, x, linear, bn, Some(&u), mode)
        }
    }
}

/// [`ncmn1_layer`] with an explicit input mask.
///
/// Eval mode takes no mask; passing one there is a contract error.
pub fn ncmn1_with_mask(
    g: &mut Graph,
    x: Var,
    linear: Linear,
    bn: &mut BNParams,
    mask: Option<&Tensor>,
    mode: Mode,
) -> Result<Var> {
    let zs = linear.preact(g, x)?;
    let u = match (mode, mask) {
        (Mode::Eval, Some(_)) => {
            return Err(Error::contract("NCMN-1 called in eval mode with a live mask"))
        }
        (Mode::Eval, None) => return layers::batchnorm_standard(g, zs, bn, Mode::Eval),
        (Mode::Train, None) => return Err(Error::contract("NCMN-1 training needs a mask")),
        (Mode::Train, Some(u)) => u,
    };
    let u = g.constant(u.clone());
    let xn = g.mul(x, u)?;
    let z = linear.preact(g, xn)?;
    let clean = layers::normalize_by(g, zs, zs, bn.epsilon)?;
    let noisy = layers::normalize_by(g, z, z, bn.epsilon)?;
    let (m, v) = (g.value(noisy.mean).clone(), g.value(noisy.var).clone());
    bn.update_running(&m, &v);
    let diff = g.sub(noisy.out, clean.out)?;
    let diff = g.stop_gradient(diff);
    g.add(clean.out, diff)
}

/// One batch-normalized layer placed on a graph: weights, BN statistics and
/// the BN affine parameters.
pub struct BnLayer<'a> {
    pub linear: Linear,
    pub bn: &'a mut BNParams,
    pub gamma: Var,
    pub beta: Var,
}

impl BnLayer<'_> {
    /// `Ψ(x) = BN(Ψ-preact(x))`, returning the normalized value and the
    /// train-mode batch statistics (unapplied).
    fn psi(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let z = self.linear.preact(g, x)?;
        match mode {
            Mode::Train => {
                let n = layers::normalize_by(g, z, z, self.bn.epsilon)?;
                let stats = (g.value(n.mean).clone(), g.value(n.var).clone());
                Ok((n.out, Some(stats)))
            }
            Mode::Eval => Ok((layers::batchnorm_standard(g, z, self.bn, Mode::Eval)?, None)),
        }
    }

    /// `Φ(x) = φ(γ ⊙ Ψ(x) + β)`.
    fn phi(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let (zhat, stats) = self.psi(g, x, mode)?;
        let a = layers::affine_activation(g, zhat, self.gamma, self.beta, Activation::Relu)?;
        Ok((a, stats))
    }

    fn params(&self) -> [Var; 3] {
        [self.linear.weight(), self.gamma, self.beta]
    }
}

/// Parameters already claimed by an NCMN-2 block on the current graph.
#[derive(Debug, Default)]
pub struct BlockClaims(HashSet<Var>);

impl BlockClaims {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, vars: impl IntoIterator<Item = Var>) -> Result<()> {
        for v in vars {
            if !self.0.insert(v) {
                return Err(Error::config(
                    "NCMN-2 block shares parameters with another NCMN-2 block",
                ));
            }
        }
        Ok(())
    }
}

/// NCMN-2 over two layers:
/// `ẑs = Ψ²(Φ¹(x))`, `ẑn = Ψ²(u² ⊙ Φ¹(u¹ ⊙ x)) − ẑs`, `ẑ' = ẑs + sg(ẑn)`.
///
/// Returns `ẑ'` before the second layer's affine step. Running statistics of
/// both layers are taken from the noisy path, which carries the forward value.
#[allow(clippy::too_many_arguments)]
pub fn ncmn2_block(
    g: &mut Graph,
    x: Var,
    first: &mut BnLayer<'_>,
    second: &mut BnLayer<'_>,
    spec: &NoiseSpec,
    src: &mut dyn NoiseSource,
    mode: Mode,
    claims: &mut BlockClaims,
) -> Result<Var> {
    claims.claim(first.params().into_iter().chain(second.params()))?;

    let (h, _) = first.phi(g, x, mode)?;
    let (zs, _) = second.psi(g, h, mode)?;
    if mode == Mode::Eval {
        return Ok(zs);
    }

    let u1 = src.mask(spec, g.shape(x))?;
    let u1 = g.constant(u1);
    let xn = g.mul(x, u1)?;
    let (hn, stats1) = first.phi(g, xn, mode)?;
    let u2 = src.mask(spec, g.shape(hn))?;
    let u2 = g.constant(u2);
    let hn = g.mul(hn, u2)?;
    let (zn, stats2) = second.psi(g, hn, mode)?;
    if let Some((m, v)) = stats1 {
        first.bn.update_running(&m, &v);
    }
    if let Some((m, v)) = stats2 {
        second.bn.update_running(&m, &v);
    }

    let noise = g.sub(zn, zs)?;
    let noise = g.stop_gradient(noise);
    g.add(zs, noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShakeBackward {
    /// Backward weights fixed at 1/2.
    Even,
    /// Backward weights resampled independently of the forward ones.
    Shake,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeConfig {
    pub backward_mode: ShakeBackward,
    /// One `α` per input image rather than per batch.
    pub per_sample: bool,
    /// Pins the forward `α₁` (and `α′` in shake mode) instead of sampling it.
    pub fixed_alpha: Option<f64>,
}

impl Default for ShakeConfig {
    fn default() -> Self {
        Self {
            backward_mode: ShakeBackward::Shake,
            per_sample: true,
            fixed_alpha: None,
        }
    }
}

fn alpha_shape(shape: &[usize], per_sample: bool) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    if per_sample && !shape.is_empty() {
        s[0] = shape[0];
    }
    s
}

/// Mixes two branch outputs.
///
/// Training computes `α′ẑ₁ + (1−α′)ẑ₂ + sg((α₁−α′)(ẑ₁−ẑ₂))`, whose forward
/// value is `α₁ẑ₁ + (1−α₁)ẑ₂`. Eval uses `α = 1/2`.
pub fn shake_combine(
    g: &mut Graph,
    z1: Var,
    z2: Var,
    cfg: &ShakeConfig,
    src: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<Var> {
    if g.shape(z1) != g.shape(z2) {
        return Err(Error::shape(format!(
            "shake branches disagree: {:?} vs {:?}",
            g.shape(z1),
            g.shape(z2)
        )));
    }
    let ashape = alpha_shape(g.shape(z1), cfg.per_sample);
    if mode == Mode::Eval {
        return average_branches(g, z1, z2, &ashape);
    }
    let draw = |src: &mut dyn NoiseSource| -> Result<Tensor> {
        match cfg.fixed_alpha {
            Some(a) => Ok(Tensor::full(&ashape, a)),
            None => src.unit_uniform(&ashape),
        }
    };
    let alpha = draw(src)?;
    let alpha_b = match cfg.backward_mode {
        ShakeBackward::Even => Tensor::full(&ashape, 0.5),
        ShakeBackward::Shake => draw(src)?,
    };
    mix(g, z1, z2, &alpha, &alpha_b)
}

fn average_branches(g: &mut Graph, z1: Var, z2: Var, ashape: &[usize]) -> Result<Var> {
    let half = Tensor::full(ashape, 0.5);
    let w1 = g.constant(half.clone());
    let w2 = g.constant(half);
    let a = g.mul(z1, w1)?;
    let b = g.mul(z2, w2)?;
    g.add(a, b)
}

fn mix(g: &mut Graph, z1: Var, z2: Var, alpha: &Tensor, alpha_b: &Tensor) -> Result<Var> {
    let w1 = g.constant(alpha_b.clone());
    let w2 = g.constant(alpha_b.map(|a| 1.0 - a));
    let a = g.mul(z1, w1)?;
    let b = g.mul(z2, w2)?;
    let signal = g.add(a, b)?;
    let gap = Tensor::new(
        alpha.shape(),
        alpha.data().iter().zip(alpha_b.data()).map(|(f, b)| f - b).collect(),
    )?;
    let gap = g.constant(gap);
    let diff = g.sub(z1, z2)?;
    let noise = g.mul(diff, gap)?;
    let noise = g.stop_gradient(noise);
    g.add(signal, noise)
}

/// Two-branch block: `ẑ_p = Ψ²_p(Φ¹_p(x))` per branch, mixed by [`shake_combine`].
///
/// Both layers of each branch use plain batch statistics; returns the mixed
/// pre-affine value.
pub fn shake_block(
    g: &mut Graph,
    x: Var,
    branch1: [&mut BnLayer<'_>; 2],
    branch2: [&mut BnLayer<'_>; 2],
    cfg: &ShakeConfig,
    src: &mut dyn NoiseSource,
    mode: Mode,
) -> Result<Var> {
    let z1 = branch_output(g, x, branch1, mode)?;
    let z2 = branch_output(g, x, branch2, mode)?;
    shake_combine(g, z1, z2, cfg, src, mode)
}

fn branch_output(g: &mut Graph, x: Var, [a, b]: [&mut BnLayer<'_>; 2], mode: Mode) -> Result<Var> {
    let (h, s1) = a.phi(g, x, mode)?;
    let (z, s2) = b.psi(g, h, mode)?;
    if let Some((m, v)) = s1 {
        a.bn.update_running(&m, &v);
    }
    if let Some((m, v)) = s2 {
        b.bn.update_running(&m, &v);
    }
    Ok(z)
}
