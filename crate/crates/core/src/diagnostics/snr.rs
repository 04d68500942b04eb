//! Signal-to-noise ratio of a pre-activation `z = Σ wᵢ uᵢ xᵢ` under
//! multiplicative noise, split as `zs = Σ wᵢxᵢ` and `zn = Σ wᵢvᵢxᵢ` with
//! `v = u − 1`:
//!
//! ```text
//! SNR = Var[zs] / E[zn²]
//!     = (1/σ²) · [1 + (2·Σ_{i<i'} wᵢwᵢ'E[xᵢxᵢ'] − E[zs]²) / Σ wᵢ²E[xᵢ²]]
//! ```
//!
//! the second line holding when the `vᵢ` are independent with variance `σ²`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::finite_or_tag;
use super::montecarlo::mc_sums;
use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::tensor::Tensor;
use crate::training::Model;

const MIN_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    #[serde(with = "finite_or_tag")]
    pub snr_monte_carlo: f64,
    #[serde(with = "finite_or_tag")]
    pub snr_analytic: f64,
    #[serde(with = "finite_or_tag")]
    pub relative_gap: f64,
    pub sample_count: usize,
}

/// First and second moments of an input vector: `E[xᵢ]` and `E[xᵢxⱼ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputMoments {
    pub mean: Vec<f64>,
    /// Row-major `n × n` matrix of raw second moments.
    pub second: Vec<f64>,
}

impl InputMoments {
    pub fn new(mean: Vec<f64>, second: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        if second.len() != n * n {
            return Err(Error::shape(format!(
                "{n} means need a {n}x{n} second-moment matrix, got {} entries",
                second.len()
            )));
        }
        Ok(Self { mean, second })
    }

    /// Independent inputs with the given means and variances.
    pub fn independent(mean: &[f64], var: &[f64]) -> Result<Self> {
        let n = mean.len();
        if var.len() != n {
            return Err(Error::shape("mean and variance lengths differ"));
        }
        let mut second = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                second[i * n + j] = mean[i] * mean[j] + if i == j { var[i] } else { 0.0 };
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            second,
        })
    }

    /// Sample moments of row vectors.
    pub fn from_samples<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut second: Vec<f64> = Vec::new();
        for row in rows {
            if count == 0 {
                mean = vec![0.0; row.len()];
                second = vec![0.0; row.len() * row.len()];
            } else if row.len() != mean.len() {
                return Err(Error::shape("ragged sample rows"));
            }
            let n = row.len();
            for i in 0..n {
                mean[i] += row[i];
                for j in 0..n {
                    second[i * n + j] += row[i] * row[j];
                }
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Degenerate("no samples".into()));
        }
        let c = count as f64;
        mean.iter_mut().for_each(|m| *m /= c);
        second.iter_mut().for_each(|m| *m /= c);
        Ok(Self { mean, second })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.dim() {
            return Err(Error::shape(format!(
                "{} weights for {} inputs",
                weights.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn second_at(&self, i: usize, j: usize) -> f64 {
        self.second[i * self.dim() + j]
    }

    /// `Σ wᵢ²E[xᵢ²]`.
    fn diagonal_energy(&self, w: &[f64]) -> f64 {
        (0..self.dim()).map(|i| w[i] * w[i] * self.second_at(i, i)).sum()
    }

    /// `2·Σ_{i<i'} wᵢwᵢ'E[xᵢxᵢ']`.
    fn cross_energy(&self, w: &[f64]) -> f64 {
        let n = self.dim();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += w[i] * w[j] * self.second_at(i, j);
            }
        }
        2.0 * s
    }

    fn signal_mean(&self, w: &[f64]) -> f64 {
        w.iter().zip(&self.mean).map(|(a, b)| a * b).sum()
    }
}

fn check_samples(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::contract(format!(
            "Monte-Carlo estimates need at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    Ok(())
}

/// The cross-term ratio `2·Σ_{i<i'} wᵢwᵢ'E[xᵢxᵢ'] / Σ wᵢ²E[xᵢ²]`, a
/// multi-variable generalization of the correlation between the `wᵢxᵢ`.
pub fn cross_term_ratio(weights: &[f64], moments: &InputMoments) -> Result<f64> {
    moments.check(weights)?;
    let denom = moments.diagonal_energy(weights);
    if denom == 0.0 {
        return Err(Error::Degenerate("E[Σ(wᵢxᵢ)²] is zero".into()));
    }
    Ok(moments.cross_energy(weights) / denom)
}

/// Closed-form SNR from input moments, assuming independent noise of variance `sigma²`.
///
/// `sigma = 0` gives `+∞`.
pub fn snr_analytic(weights: &[f64], moments: &InputMoments, sigma: f64) -> Result<f64> {
    moments.check(weights)?;
    let denom = moments.diagonal_energy(weights);
    if denom == 0.0 {
        return Err(Error::Degenerate("E[Σ(wᵢxᵢ)²] is zero".into()));
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let ez = moments.signal_mean(weights);
    let bracket = 1.0 + (moments.cross_energy(weights) - ez * ez) / denom;
    Ok(bracket / (sigma * sigma))
}

/// Monte-Carlo SNR: draws `(x, v)` pairs and returns `Var̂[zs] / Ê[zn²]`.
///
/// `sampler` fills one input vector per call. Returns `+∞` when the noise
/// component is identically zero.
pub fn snr_monte_carlo<S>(
    weights: &[f64],
    sampler: S,
    spec: &NoiseSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    S: Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync,
{
    check_samples(n_samples)?;
    spec.validate()?;
    let n = weights.len();
    let [s1, s2, noise2] = mc_sums(n_samples, seed, |rng| {
        let mut x = vec![0.0; n];
        sampler(rng, &mut x);
        let (mut zs, mut zn) = (0.0, 0.0);
        for i in 0..n {
            let wx = weights[i] * x[i];
            zs += wx;
            zn += wx * (spec.draw(rng) - 1.0);
        }
        [zs, zs * zs, zn * zn]
    });
    let c = n_samples as f64;
    let var_s = s2 / c - (s1 / c) * (s1 / c);
    if noise2 == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(var_s / (noise2 / c))
}

/// Both estimators side by side.
pub fn snr_report<S>(
    weights: &[f64],
    sampler: S,
    moments: &InputMoments,
    spec: &NoiseSpec,
    n_samples: usize,
    seed: u64,
) -> Result<SnrReport>
where
    S: Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync,
{
    let mc = snr_monte_carlo(weights, sampler, spec, n_samples, seed)?;
    let analytic = snr_analytic(weights, moments, spec.variance().sqrt())?;
    let relative_gap = if mc.is_infinite() && analytic.is_infinite() {
        0.0
    } else {
        (mc - analytic).abs() / analytic.max(f64::MIN_POSITIVE)
    };
    Ok(SnrReport {
        snr_monte_carlo: mc,
        snr_analytic: analytic,
        relative_gap,
        sample_count: n_samples,
    })
}

/// Variance of the normalized noise component of NCMN-1,
/// `Var[ẑn] = σ²·E[Σ(wᵢxᵢ)²] / Var[zs]`.
///
/// `signal_var` overrides `Var[zs]` (e.g. with batch-norm statistics);
/// otherwise it is computed from the moments.
pub fn ncmn_noise_variance(
    weights: &[f64],
    moments: &InputMoments,
    sigma: f64,
    signal_var: Option<f64>,
) -> Result<f64> {
    moments.check(weights)?;
    let var_s = match signal_var {
        Some(v) => v,
        None => {
            let ez = moments.signal_mean(weights);
            moments.diagonal_energy(weights) + moments.cross_energy(weights) - ez * ez
        }
    };
    if !(var_s > 0.0) {
        return Err(Error::Degenerate("Var[zs] is zero".into()));
    }
    Ok(sigma * sigma * moments.diagonal_energy(weights) / var_s)
}

/// Monte-Carlo counterpart of [`ncmn_noise_variance`]: `Ê[zn²] / Var̂[zs]`.
pub fn ncmn_noise_variance_mc<S>(
    weights: &[f64],
    sampler: S,
    spec: &NoiseSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    S: Fn(&mut ChaCha8Rng, &mut [f64]) + Send + Sync,
{
    let snr = snr_monte_carlo(weights, sampler, spec, n_samples, seed)?;
    if snr == 0.0 {
        return Err(Error::Degenerate("Var[zs] is zero".into()));
    }
    Ok(1.0 / snr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeSnr {
    /// `3·[1 + 4E[ẑ₁ẑ₂] / E[(ẑ₁−ẑ₂)²]]` from sample moments.
    #[serde(with = "finite_or_tag")]
    pub formula: f64,
    /// `Ê[ẑs²] / Ê[ẑn²]` with `ẑs = (ẑ₁+ẑ₂)/2`, `ẑn = v(ẑ₁−ẑ₂)`, `v ~ U[−½, ½]`.
    #[serde(with = "finite_or_tag")]
    pub direct: f64,
    pub sample_count: usize,
}

/// SNR of an even-mode shake-shake mix of two branch outputs.
pub fn shake_snr<S>(sampler: S, n_samples: usize, seed: u64) -> Result<ShakeSnr>
where
    S: Fn(&mut ChaCha8Rng) -> (f64, f64) + Send + Sync,
{
    check_samples(n_samples)?;
    let [cross, gap2, sig2, noise2] = mc_sums(n_samples, seed, |rng| {
        let (a, b) = sampler(rng);
        let v = rng.random::<f64>() - 0.5;
        let s = 0.5 * (a + b);
        let n = v * (a - b);
        [a * b, (a - b) * (a - b), s * s, n * n]
    });
    let formula = if gap2 == 0.0 {
        f64::INFINITY
    } else {
        3.0 * (1.0 + 4.0 * cross / gap2)
    };
    let direct = if noise2 == 0.0 {
        f64::INFINITY
    } else {
        sig2 / noise2
    };
    Ok(ShakeSnr {
        formula,
        direct,
        sample_count: n_samples,
    })
}

/// Per-layer SNR of a trained model: the analytic SNR of every output
/// channel, from input moments measured over 3×3 patches, averaged over
/// the channels whose signal energy is nonzero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSnr {
    pub layer: usize,
    #[serde(with = "finite_or_tag")]
    pub mean_snr_analytic: f64,
    pub channels: usize,
    pub patches: usize,
}

const MAX_PATCHES: usize = 2048;

fn patches(x: &Tensor, stride: usize) -> (Vec<Vec<f64>>, usize) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = ((h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1);
    let total = n * oh * ow;
    let step = total.div_ceil(MAX_PATCHES).max(1);
    let mut rows = Vec::new();
    for p in (0..total).step_by(step) {
        let (b, rest) = (p / (oh * ow), p % (oh * ow));
        let (oy, ox) = (rest / ow, rest % ow);
        let mut row = Vec::with_capacity(c * 9);
        for ch in 0..c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let y = (oy * stride + ky) as isize - 1;
                    let xx = (ox * stride + kx) as isize - 1;
                    let inside = y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w;
                    row.push(if inside {
                        x.data()[((b * c + ch) * h + y as usize) * w + xx as usize]
                    } else {
                        0.0
                    });
                }
            }
        }
        rows.push(row);
    }
    (rows, total)
}

pub fn model_snr(model: &Model, batch: &Tensor, spec: &NoiseSpec) -> Result<Vec<LayerSnr>> {
    let sigma = spec.variance().sqrt();
    let mut out = Vec::new();
    for (l, x) in model.layer_inputs(batch)? {
        let (kernel, stride) = model.layer_kernel(l).expect("layer exists");
        let (rows, _) = patches(&x, stride);
        let moments = InputMoments::from_samples(rows.iter().map(Vec::as_slice))?;
        let c_out = kernel.shape()[0];
        let per = kernel.len() / c_out;
        let mut vals = Vec::new();
        for j in 0..c_out {
            match snr_analytic(&kernel.data()[j * per..(j + 1) * per], &moments, sigma) {
                Ok(v) => vals.push(v),
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let mean = if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        out.push(LayerSnr {
            layer: l,
            mean_snr_analytic: mean,
            channels: vals.len(),
            patches: rows.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn rademacher(rng: &mut ChaCha8Rng, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }

    #[test]
    fn single_unit_closed_form() {
        let snr = snr_monte_carlo(&[1.0], rademacher, &NoiseSpec::uniform(0.5).per_activation(), 200_000, 1).unwrap();
        assert!((snr - 4.0).abs() / 4.0 < 0.02, "{snr}");
        let m = InputMoments::independent(&[0.0], &[1.0]).unwrap();
        assert!((snr_analytic(&[1.0], &m, 0.5).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_is_infinite() {
        let spec = NoiseSpec::uniform(0.0).per_activation();
        assert_eq!(snr_monte_carlo(&[1.0], rademacher, &spec, 10_000, 1).unwrap(), f64::INFINITY);
        let m = InputMoments::independent(&[0.0], &[1.0]).unwrap();
        assert_eq!(snr_analytic(&[1.0], &m, 0.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let spec = NoiseSpec::uniform(0.1).per_activation();
        assert!(matches!(snr_monte_carlo(&[1.0], rademacher, &spec, 10, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn two_independent_inputs() {
        let spec = NoiseSpec::uniform(0.35).per_activation();
        let gauss = |rng: &mut ChaCha8Rng, x: &mut [f64]| {
            for v in x.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        };
        let snr = snr_monte_carlo(&[1.0, 1.0], gauss, &spec, 400_000, 2).unwrap();
        let want: f64 = 1.0 / (0.35 * 0.35);
        assert!((want - 8.163).abs() < 1e-3);
        assert!((snr - want).abs() / want < 0.02, "{snr}");
    }

    #[test]
    fn duplicated_inputs_double_the_snr() {
        // x₂ = x₁, zero mean, unit variance
        let m = InputMoments::new(vec![0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((cross_term_ratio(&[1.0, 1.0], &m).unwrap() - 1.0).abs() < 1e-15);
        let s = snr_analytic(&[1.0, 1.0], &m, 0.3).unwrap();
        assert!((s - 2.0 / 0.09).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let m = InputMoments::independent(&[0.0], &[0.0]).unwrap();
        assert!(matches!(snr_analytic(&[1.0], &m, 0.3), Err(Error::Degenerate(_))));
        assert!(matches!(ncmn_noise_variance(&[1.0], &m, 0.3, None), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ncmn_variance_single_unit() {
        let m = InputMoments::independent(&[0.0], &[1.0]).unwrap();
        assert!((ncmn_noise_variance(&[1.0], &m, 0.35, None).unwrap() - 0.1225).abs() < 1e-15);
        assert_eq!(ncmn_noise_variance(&[1.0], &m, 0.0, None).unwrap(), 0.0);
    }

    #[test]
    fn shake_special_cases() {
        let indep = |rng: &mut ChaCha8Rng| (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let s = shake_snr(indep, 200_000, 3).unwrap();
        assert!((s.formula - 3.0).abs() / 3.0 < 0.02, "{s:?}");
        let anti = |rng: &mut ChaCha8Rng| {
            let a: f64 = rng.sample(StandardNormal);
            (a, -a)
        };
        let s = shake_snr(anti, 10_000, 3).unwrap();
        assert!(s.formula.abs() < 1e-12 && s.direct.abs() < 1e-12);
        let same = |rng: &mut ChaCha8Rng| {
            let a: f64 = rng.sample(StandardNormal);
            (a, a)
        };
        assert_eq!(shake_snr(same, 10_000, 3).unwrap().formula, f64::INFINITY);
    }

    #[test]
    fn report_serializes_infinity() {
        let r = SnrReport {
            snr_monte_carlo: f64::INFINITY,
            snr_analytic: f64::INFINITY,
            relative_gap: 0.0,
            sample_count: 10,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: SnrReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
