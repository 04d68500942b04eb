//! Mean absolute Pearson correlation between feature maps.
//!
//! Batch and spatial axes are flattened into one sample axis, so every
//! spatial position of every image counts as a sample of its channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;
use crate::training::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCorrelation {
    /// Mean of `|ρ|` over unordered channel pairs.
    pub mean_abs: f64,
    /// Row-major `c × c` correlation matrix (unit diagonal, zero rows for
    /// zero-variance channels).
    pub matrix: Vec<f64>,
    pub channels: usize,
    /// Channels with zero variance; their pairs count as `|ρ| = 0`.
    pub zero_variance: Vec<usize>,
}

impl FeatureCorrelation {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.channels + j]
    }
}

/// Channel-major copy: one contiguous row of samples per channel.
fn channel_rows(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, spatial) = t.channel_layout()?;
    let n = t.shape()[0] * spatial;
    let mut rows = vec![0.0; c * n];
    for (i, chunk) in t.data().chunks(spatial).enumerate() {
        let (b, ch) = (i / c, i % c);
        rows[ch * n + b * spatial..ch * n + (b + 1) * spatial].copy_from_slice(chunk);
    }
    Ok((c, n, rows))
}

pub fn feature_correlation(activations: &Tensor) -> Result<FeatureCorrelation> {
    let (c, n, mut rows) = channel_rows(activations)?;
    if c < 2 {
        return Err(Error::shape(format!("need at least 2 channels, got {c}")));
    }
    if n < 2 {
        return Err(Error::shape(format!("need at least 2 samples, got {n}")));
    }
    let mut norms = vec![0.0; c];
    for (ch, row) in rows.chunks_mut(n).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
        norms[ch] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let zero_variance: Vec<usize> = (0..c).filter(|&i| norms[i] == 0.0).collect();

    let rows = &rows;
    let norms = &norms;
    let matrix: Vec<f64> = par::map_indexed(c, |i| {
        (0..c)
            .map(|j| {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    0.0
                } else if i == j {
                    1.0
                } else {
                    let dot: f64 = rows[i * n..(i + 1) * n]
                        .iter()
                        .zip(&rows[j * n..(j + 1) * n])
                        .map(|(a, b)| a * b)
                        .sum();
                    (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
                }
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect();

    let mut total = 0.0;
    for i in 0..c {
        for j in i + 1..c {
            total += matrix[i * c + j].abs();
        }
    }
    let pairs = (c * (c - 1) / 2) as f64;
    Ok(FeatureCorrelation {
        mean_abs: total / pairs,
        matrix,
        channels: c,
        zero_variance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    pub feature_map_size: usize,
    pub mean_abs_corr: f64,
    pub zero_variance_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationGroup {
    /// Spatial side length of the feature maps in this group (1 for vectors).
    pub feature_map_size: usize,
    pub mean_abs_corr: f64,
    /// Population standard deviation across the group's layers.
    pub std_across_layers: f64,
    pub layers: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub groups: Vec<CorrelationGroup>,
    pub per_layer: Vec<LayerCorrelation>,
}

impl CorrelationReport {
    /// Builds the report from `(layer index, post-BN activations)` pairs.
    pub fn from_features(features: &[(usize, Tensor)]) -> Result<Self> {
        let mut per_layer = Vec::with_capacity(features.len());
        for (layer, t) in features {
            let size = if t.rank() == 4 { t.shape()[2] } else { 1 };
            let fc = feature_correlation(t)?;
            per_layer.push(LayerCorrelation {
                layer: *layer,
                feature_map_size: size,
                mean_abs_corr: fc.mean_abs,
                zero_variance_channels: fc.zero_variance.len(),
            });
        }
        let mut sizes: Vec<usize> = per_layer.iter().map(|l| l.feature_map_size).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes.dedup();
        let groups = sizes
            .into_iter()
            .map(|size| {
                let vals: Vec<f64> = per_layer
                    .iter()
                    .filter(|l| l.feature_map_size == size)
                    .map(|l| l.mean_abs_corr)
                    .collect();
                let k = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / k;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
                CorrelationGroup {
                    feature_map_size: size,
                    mean_abs_corr: mean,
                    std_across_layers: var.sqrt(),
                    layers: vals.len(),
                }
            })
            .collect();
        Ok(Self { groups, per_layer })
    }

    /// Mean of the per-layer values.
    pub fn overall(&self) -> f64 {
        if self.per_layer.is_empty() {
            return 0.0;
        }
        self.per_layer.iter().map(|l| l.mean_abs_corr).sum::<f64>() / self.per_layer.len() as f64
    }
}

/// Eval-mode correlation report: post-BN features of every layer except the
/// first (or of every residual block output), grouped by feature-map size.
pub fn correlation_report(model: &Model, batch: &Tensor) -> Result<CorrelationReport> {
    let features = model.post_bn_features(batch)?;
    CorrelationReport::from_features(&features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn perfect_anticorrelation() {
        let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let mut data = Vec::new();
        for v in &x {
            data.push(*v);
            data.push(-3.0 * v);
        }
        let t = Tensor::new(&[10, 2], data).unwrap();
        let fc = feature_correlation(&t).unwrap();
        assert!((fc.mean_abs - 1.0).abs() < 1e-12);
        assert!((fc.at(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_flagged() {
        let data: Vec<f64> = (0..10).flat_map(|i| [i as f64, 4.0]).collect();
        let fc = feature_correlation(&Tensor::new(&[10, 2], data).unwrap()).unwrap();
        assert_eq!(fc.mean_abs, 0.0);
        assert_eq!(fc.zero_variance, vec![1]);
    }

    #[test]
    fn spatial_positions_are_samples() {
        // [2, 2, 2, 1]: channel 1 = 2 × channel 0 at every position.
        let t = Tensor::new(&[2, 2, 2, 1], vec![1.0, 2.0, 2.0, 4.0, 0.5, -1.0, 1.0, -2.0]).unwrap();
        assert!((feature_correlation(&t).unwrap().mean_abs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_too_small() {
        assert!(feature_correlation(&Tensor::zeros(&[5, 1])).is_err());
        assert!(feature_correlation(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
        let t = Tensor::new(&[100, 3], data.clone()).unwrap();
        let scaled: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 3 == 0 { -2.5 * v + 7.0 } else { *v })
            .collect();
        let a = feature_correlation(&t).unwrap();
        let b = feature_correlation(&Tensor::new(&[100, 3], scaled).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.at(i, j).abs() - b.at(i, j).abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn groups_by_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mk = |s: usize| {
            let n = 4 * 3 * s * s;
            Tensor::new(&[4, 3, s, s], (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
        };
        let feats = vec![(1, mk(4)), (2, mk(4)), (3, mk(2))];
        let r = CorrelationReport::from_features(&feats).unwrap();
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.groups[0].feature_map_size, 4);
        assert_eq!(r.groups[0].layers, 2);
        assert_eq!(r.groups[1].std_across_layers, 0.0);
        assert!(r.groups.iter().all(|g| (0.0..=1.0).contains(&g.mean_abs_corr)));
    }
}
