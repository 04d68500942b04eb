//! Datasets: seeded synthetic generators and the CIFAR-10 binary format.
//!
//! A CIFAR-10 record is 3073 bytes: one label byte followed by 1024 red,
//! 1024 green and 1024 blue pixel bytes, each plane row-major over 32×32.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(&shape, data).expect("sizes agree");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::Data(format!("subset of {n} from {} samples", self.len())));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Self::new(images, labels, self.classes)
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Self, Self)> {
        if n > self.len() {
            return Err(Error::Data(format!("split at {n} of {} samples", self.len())));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let (a, la) = self.batch(&head);
        let (b, lb) = self.batch(&tail);
        Ok((Self::new(a, la, self.classes)?, Self::new(b, lb, self.classes)?))
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> ChannelStats {
        let c = self.images.shape()[1];
        let spatial = self.images.shape()[2] * self.images.shape()[3];
        let count = (self.len() * spatial) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, plane) in self.images.data().chunks(spatial).enumerate() {
            mean[i % c] += plane.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for (i, plane) in self.images.data().chunks(spatial).enumerate() {
            let m = mean[i % c];
            sq[i % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        let std = sq.iter().map(|s| (s / count).sqrt()).collect();
        ChannelStats { mean, std }
    }

    /// `(x − mean) / std` per channel; constant channels are only centered.
    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        let c = self.images.shape()[1];
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::Data(format!(
                "statistics for {} channels applied to {c}",
                stats.mean.len()
            )));
        }
        let spatial = self.images.shape()[2] * self.images.shape()[3];
        for (i, plane) in self.images.data_mut().chunks_mut(spatial).enumerate() {
            let (m, s) = (stats.mean[i % c], stats.std[i % c]);
            let s = if s > 0.0 { s } else { 1.0 };
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Gaussian class blobs as `[n, dim, 1, 1]` images. Labels cycle through
/// the classes; centers are drawn with per-coordinate scale 2.
pub fn synthetic_blobs(classes: usize, dim: usize, n: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::config("blobs need at least 2 classes and a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        data.extend(centers[c].iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
    }
    Dataset::new(Tensor::new(&[n, dim, 1, 1], data)?, labels, classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub pixel_noise: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            size: 8,
            channels: 3,
            pixel_noise: 0.5,
        }
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    color: Vec<f64>,
}

/// Image-like class textures: each class is a sum of two oriented colour
/// gratings, and each sample shifts their phases at random, scales their
/// amplitudes and adds pixel noise.
pub fn synthetic_textures(spec: &TextureSpec, n: usize, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.size == 0 || spec.channels == 0 {
        return Err(Error::config("textures need at least 2 classes and a positive size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: Vec<[Grating; 2]> = (0..spec.classes)
        .map(|c| {
            let mut grating = |theta: f64, freq: f64| {
                let color = (0..spec.channels).map(|_| rng.random_range(-1.0..1.0)).collect();
                Grating {
                    fx: freq * theta.cos(),
                    fy: freq * theta.sin(),
                    color,
                }
            };
            let theta = PI * c as f64 / spec.classes as f64;
            let freq = 1.0 + (c % 2) as f64;
            [grating(theta, freq), grating(theta + PI / 2.0, 3.0 - freq)]
        })
        .collect();

    let (s, ch) = (spec.size, spec.channels);
    let mut data = Vec::with_capacity(n * ch * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        labels.push(c);
        let phases: [f64; 2] = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        let amps: [f64; 2] = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
        for k in 0..ch {
            for y in 0..s {
                for x in 0..s {
                    let mut v = 0.0;
                    for (j, gr) in classes[c].iter().enumerate() {
                        let arg = 2.0 * PI * (gr.fx * x as f64 + gr.fy * y as f64) / s as f64 + phases[j];
                        v += amps[j] * gr.color[k] * arg.sin();
                    }
                    v += spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
                    data.push(v);
                }
            }
        }
    }
    Dataset::new(Tensor::new(&[n, ch, s, s], data)?, labels, spec.classes)
}

/// Decodes CIFAR-10 records. Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, CIFAR_CLASSES)
}

/// Encodes one record; `pixels` is channel-major R, G, B.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != CIFAR_RECORD - 1 {
        return Err(Error::Data(format!("record needs {} pixel bytes, got {}", CIFAR_RECORD - 1, pixels.len())));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(label);
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Reads and concatenates CIFAR-10 files, keeping at most `limit` records.
pub fn load_cifar10(paths: &[impl AsRef<Path>], limit: Option<usize>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                p.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    if let Some(limit) = limit {
        let available = bytes.len() / CIFAR_RECORD;
        if limit > available {
            return Err(Error::Data(format!("subset of {limit} from {available} records")));
        }
        bytes.truncate(limit * CIFAR_RECORD);
    }
    parse_cifar10(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_contract() {
        let a = synthetic_blobs(2, 16, 512, 7).unwrap();
        assert_eq!(a.len(), 512);
        assert_eq!(a.images.shape(), &[512, 16, 1, 1]);
        assert!(a.labels.iter().all(|&l| l < 2));
        assert_eq!(a, synthetic_blobs(2, 16, 512, 7).unwrap());
        assert_ne!(a, synthetic_blobs(2, 16, 512, 8).unwrap());
    }

    #[test]
    fn textures_are_seeded() {
        let spec = TextureSpec::default();
        let a = synthetic_textures(&spec, 20, 1).unwrap();
        assert_eq!(a.images.shape(), &[20, 3, 8, 8]);
        assert_eq!(a, synthetic_textures(&spec, 20, 1).unwrap());
    }

    #[test]
    fn cifar_fixture_round_trip() {
        let mut bytes = Vec::new();
        let mut px0 = vec![0u8; 3072];
        px0[0] = 255; // red (0, 0)
        px0[1024 + 33] = 17; // green (1, 1)
        px0[2048 + 1023] = 200; // blue (31, 31)
        bytes.extend(encode_cifar10_record(3, &px0).unwrap());
        let px1: Vec<u8> = (0..3072).map(|i| (i % 256) as u8).collect();
        bytes.extend(encode_cifar10_record(9, &px1).unwrap());
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        let x = d.images.data();
        assert_eq!(x[0], 1.0);
        assert_eq!(x[1024 + 33], 17.0 / 255.0);
        assert_eq!(x[2048 + 1023], 200.0 / 255.0);
        for (i, &b) in px1.iter().enumerate() {
            assert_eq!((x[3072 + i] * 255.0).round() as u8, b);
        }
    }

    #[test]
    fn cifar_format_errors() {
        assert!(matches!(parse_cifar10(&[0u8; 3072]), Err(Error::Data(_))));
        let mut rec = vec![10u8];
        rec.extend(vec![0u8; 3072]);
        assert!(matches!(parse_cifar10(&rec), Err(Error::Data(_))));
    }

    #[test]
    fn standardization() {
        let mut d = synthetic_textures(&TextureSpec::default(), 50, 3).unwrap();
        let st = d.channel_stats();
        d.standardize(&st).unwrap();
        let after = d.channel_stats();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-12);
            assert!((after.std[c] - 1.0).abs() < 1e-12);
        }
    }
}
