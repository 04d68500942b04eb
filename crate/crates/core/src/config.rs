//! Experiment configuration files.
//!
//! The format is flat: optional `[section]` headers, one `key = value` per
//! line, lists separated by commas, and full-line comments starting with `#`
//! or `;`. Every key has a default, so an empty file is a valid
//! configuration. Key names are unique across sections; a key placed under
//! the wrong header is rejected, while keys before the first header may
//! come from any section.
//!
//! ```text
//! [model]
//! architecture = plain_cnn      # plain_cnn | residual | residual_2branch
//! depth = 8
//! width = 2
//! base_width = 4
//!
//! [noise]
//! noise_type = ncmn1            # none | mn | weight_mn | ncmn0 | ncmn1 | ncmn2 | shake
//! noise_kind = uniform          # uniform | gaussian | dropout
//! sigma = 0.35
//! keep_prob = 0.8
//! share_spatial = true
//! noise_skip_first = false
//! shake_backward = shake        # shake | even
//! shake_per_sample = true
//! shake_alpha = none            # none or a fixed value in [0, 1]
//!
//! [optimizer]
//! alpha0 = 0.04
//! weight_decay = 0.0005
//! momentum = 0.9
//!
//! [schedule]
//! schedule = cosine
//! epochs = 30
//! batch_size = 64
//! eval_batch_size = 256
//!
//! [data]
//! dataset = synthetic_textures  # synthetic_blobs | synthetic_textures | cifar10_binary
//! classes = 10
//! train_size = 1024
//! test_size = 512
//! data_seed = 11
//! dim = 16                      # blobs
//! image_size = 8                # textures
//! channels = 3                  # textures
//! pixel_noise = 0.5             # textures
//! train_files =                 # cifar10_binary
//! test_files =                  # cifar10_binary
//!
//! [run]
//! seeds = 1, 2, 3
//! output_dir = runs/default
//!
//! [diagnostics]
//! correlation = true
//! snr = false
//! diagnostic_batch = 256
//! ```
//!
//! [`ExperimentConfig::echo`] prints every key in this order, and parsing
//! the echo gives back the same configuration.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseKind, ShakeBackward};
use crate::training::{Architecture, ModelConfig, NoiseType, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SyntheticBlobs,
    SyntheticTextures,
    Cifar10Binary,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::SyntheticBlobs => "synthetic_blobs",
            DatasetKind::SyntheticTextures => "synthetic_textures",
            DatasetKind::Cifar10Binary => "cifar10_binary",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub image_size: usize,
    pub channels: usize,
    pub pixel_noise: f64,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::SyntheticTextures,
            classes: 10,
            train_size: 1024,
            test_size: 512,
            seed: 11,
            dim: 16,
            image_size: 8,
            channels: 3,
            pixel_noise: 0.5,
            train_files: Vec::new(),
            test_files: Vec::new(),
        }
    }
}

impl DataConfig {
    /// Channels of the images this dataset yields.
    pub fn input_channels(&self) -> usize {
        match self.dataset {
            DatasetKind::SyntheticBlobs => self.dim,
            DatasetKind::SyntheticTextures => self.channels,
            DatasetKind::Cifar10Binary => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub correlation: bool,
    pub snr: bool,
    pub batch: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            correlation: true,
            snr: false,
            batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// `input_channels` and `class_count` follow the data section.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            seeds: vec![1, 2, 3],
            output_dir: "runs/default".into(),
            diagnostics: DiagnosticsConfig::default(),
        };
        cfg.sync_model();
        cfg
    }
}

const SECTIONS: [(&str, &[&str]); 7] = [
    ("model", &["architecture", "depth", "width", "base_width"]),
    (
        "noise",
        &[
            "noise_type",
            "noise_kind",
            "sigma",
            "keep_prob",
            "share_spatial",
            "noise_skip_first",
            "shake_backward",
            "shake_per_sample",
            "shake_alpha",
        ],
    ),
    ("optimizer", &["alpha0", "weight_decay", "momentum"]),
    ("schedule", &["schedule", "epochs", "batch_size", "eval_batch_size"]),
    (
        "data",
        &[
            "dataset",
            "classes",
            "train_size",
            "test_size",
            "data_seed",
            "dim",
            "image_size",
            "channels",
            "pixel_noise",
            "train_files",
            "test_files",
        ],
    ),
    ("run", &["seeds", "output_dir"]),
    ("diagnostics", &["correlation", "snr", "diagnostic_batch"]),
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
}

type SetResult = std::result::Result<(), String>;

fn count(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a non-negative integer, got `{v}`"))
}

fn positive(v: &str) -> std::result::Result<usize, String> {
    match count(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn real(v: &str) -> std::result::Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got `{v}`")),
    }
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn choice<T: Copy>(v: &str, options: &[(&str, T)]) -> std::result::Result<T, String> {
    options.iter().find(|(n, _)| *n == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got `{v}`", names.join(", "))
    })
}

const KINDS: [(&str, NoiseKind); 3] = [
    ("uniform", NoiseKind::Uniform),
    ("gaussian", NoiseKind::Gaussian),
    ("dropout", NoiseKind::BernoulliDropout),
];
const BACKWARD: [(&str, ShakeBackward); 2] = [("shake", ShakeBackward::Shake), ("even", ShakeBackward::Even)];
const DATASETS: [(&str, DatasetKind); 3] = [
    ("synthetic_blobs", DatasetKind::SyntheticBlobs),
    ("synthetic_textures", DatasetKind::SyntheticTextures),
    ("cifar10_binary", DatasetKind::Cifar10Binary),
];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], t: T) -> &'static str {
    options.iter().find(|(_, o)| *o == t).map(|(n, _)| *n).expect("every variant is listed")
}

impl ExperimentConfig {
    fn sync_model(&mut self) {
        self.model.input_channels = self.data.input_channels();
        self.model.class_count = self.data.classes;
    }

    fn set(&mut self, key: &str, v: &str) -> SetResult {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "architecture" => {
                m.architecture = Architecture::from_name(v)
                    .ok_or_else(|| format!("unknown architecture `{v}`"))?
            }
            "depth" => m.depth = positive(v)?,
            "width" => m.width = positive(v)?,
            "base_width" => m.base_width = positive(v)?,
            "noise_type" => {
                m.noise_type = NoiseType::from_name(v).ok_or_else(|| format!("unknown noise type `{v}`"))?
            }
            "noise_kind" => m.noise.kind = choice(v, &KINDS)?,
            "sigma" => {
                let s = real(v)?;
                if s < 0.0 {
                    return Err(format!("sigma must satisfy σ ≥ 0, got {s}"));
                }
                m.noise.sigma = s;
            }
            "keep_prob" => {
                let p = real(v)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(format!("keep_prob must lie in (0, 1], got {p}"));
                }
                m.noise.keep_prob = p;
            }
            "share_spatial" => m.noise.share_spatial = flag(v)?,
            "noise_skip_first" => m.noise_skip_first = flag(v)?,
            "shake_backward" => m.shake.backward_mode = choice(v, &BACKWARD)?,
            "shake_per_sample" => m.shake.per_sample = flag(v)?,
            "shake_alpha" => {
                m.shake.fixed_alpha = match v {
                    "none" => None,
                    _ => {
                        let a = real(v)?;
                        if !(0.0..=1.0).contains(&a) {
                            return Err(format!("shake_alpha must lie in [0, 1], got {a}"));
                        }
                        Some(a)
                    }
                }
            }
            "alpha0" => {
                let a = real(v)?;
                if a < 0.0 {
                    return Err(format!("alpha0 must be non-negative, got {a}"));
                }
                t.optimizer.base_lr = a;
            }
            "weight_decay" => {
                let l = real(v)?;
                if l < 0.0 {
                    return Err(format!("weight_decay must satisfy λ ≥ 0, got {l}"));
                }
                t.optimizer.weight_decay = l;
            }
            "momentum" => {
                let mu = real(v)?;
                if !(0.0..1.0).contains(&mu) {
                    return Err(format!("momentum must lie in [0, 1), got {mu}"));
                }
                t.optimizer.momentum = mu;
            }
            "schedule" => {
                if v != "cosine" {
                    return Err(format!("only the cosine schedule is supported, got `{v}`"));
                }
            }
            "epochs" => t.epochs = count(v)?,
            "batch_size" => {
                t.batch_size = count(v)?;
                if t.batch_size < 2 {
                    return Err("batch_size must be at least 2 for batch norm".into());
                }
            }
            "eval_batch_size" => t.eval_batch_size = positive(v)?,
            "dataset" => d.dataset = choice(v, &DATASETS)?,
            "classes" => {
                d.classes = count(v)?;
                if d.classes < 2 {
                    return Err("classes must be at least 2".into());
                }
            }
            "train_size" => d.train_size = positive(v)?,
            "test_size" => d.test_size = positive(v)?,
            "data_seed" => d.seed = v.parse().map_err(|_| format!("expected an integer seed, got `{v}`"))?,
            "dim" => d.dim = positive(v)?,
            "image_size" => d.image_size = positive(v)?,
            "channels" => d.channels = positive(v)?,
            "pixel_noise" => {
                d.pixel_noise = real(v)?;
                if d.pixel_noise < 0.0 {
                    return Err("pixel_noise must be non-negative".into());
                }
            }
            "train_files" => d.train_files = list(v),
            "test_files" => d.test_files = list(v),
            "seeds" => {
                let seeds = list(v)
                    .iter()
                    .map(|s| s.parse::<u64>().map_err(|_| format!("expected an integer seed, got `{s}`")))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                if seeds.is_empty() {
                    return Err("at least one seed is required".into());
                }
                self.seeds = seeds;
            }
            "output_dir" => {
                if v.is_empty() {
                    return Err("output_dir must not be empty".into());
                }
                self.output_dir = v.to_string();
            }
            "correlation" => self.diagnostics.correlation = flag(v)?,
            "snr" => self.diagnostics.snr = flag(v)?,
            "diagnostic_batch" => self.diagnostics.batch = positive(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Cross-key constraints, reported against the line of the first listed
    /// key that appears in the file.
    fn check(&self, lines: &HashMap<String, usize>) -> Result<()> {
        let at = |keys: &[&str], message: String| {
            let line = keys.iter().filter_map(|k| lines.get(*k)).max().copied().unwrap_or(0);
            Error::Parse { line, message }
        };
        if let Err(e) = self.model.validate() {
            return Err(at(&["depth", "architecture", "noise_type"], e.to_string()));
        }
        if self.data.dataset == DatasetKind::Cifar10Binary {
            if self.data.classes != 10 {
                return Err(at(&["classes", "dataset"], "cifar10_binary has 10 classes".into()));
            }
            if self.data.train_files.is_empty() || self.data.test_files.is_empty() {
                return Err(at(
                    &["train_files", "test_files", "dataset"],
                    "cifar10_binary needs train_files and test_files".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text form listing every key.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let alpha = m.shake.fixed_alpha.map_or_else(|| "none".to_string(), |a| a.to_string());
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let values: HashMap<&str, String> = [
            ("architecture", m.architecture.name().to_string()),
            ("depth", m.depth.to_string()),
            ("width", m.width.to_string()),
            ("base_width", m.base_width.to_string()),
            ("noise_type", m.noise_type.name().to_string()),
            ("noise_kind", name_of(&KINDS, m.noise.kind).to_string()),
            ("sigma", m.noise.sigma.to_string()),
            ("keep_prob", m.noise.keep_prob.to_string()),
            ("share_spatial", m.noise.share_spatial.to_string()),
            ("noise_skip_first", m.noise_skip_first.to_string()),
            ("shake_backward", name_of(&BACKWARD, m.shake.backward_mode).to_string()),
            ("shake_per_sample", m.shake.per_sample.to_string()),
            ("shake_alpha", alpha),
            ("alpha0", t.optimizer.base_lr.to_string()),
            ("weight_decay", t.optimizer.weight_decay.to_string()),
            ("momentum", t.optimizer.momentum.to_string()),
            ("schedule", "cosine".to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("eval_batch_size", t.eval_batch_size.to_string()),
            ("dataset", d.dataset.name().to_string()),
            ("classes", d.classes.to_string()),
            ("train_size", d.train_size.to_string()),
            ("test_size", d.test_size.to_string()),
            ("data_seed", d.seed.to_string()),
            ("dim", d.dim.to_string()),
            ("image_size", d.image_size.to_string()),
            ("channels", d.channels.to_string()),
            ("pixel_noise", d.pixel_noise.to_string()),
            ("train_files", d.train_files.join(", ")),
            ("test_files", d.test_files.join(", ")),
            ("seeds", seeds.join(", ")),
            ("output_dir", self.output_dir.clone()),
            ("correlation", self.diagnostics.correlation.to_string()),
            ("snr", self.diagnostics.snr.to_string()),
            ("diagnostic_batch", self.diagnostics.batch.to_string()),
        ]
        .into_iter()
        .collect();
        let mut out = String::new();
        for (i, (section, keys)) in SECTIONS.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            writeln!(out, "[{section}]").unwrap();
            for k in *keys {
                let v = &values[k];
                if v.is_empty() {
                    writeln!(out, "{k} =").unwrap();
                } else {
                    writeln!(out, "{k} = {v}").unwrap();
                }
            }
        }
        out
    }
}

/// Parses configuration text; errors carry the 1-based line number.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<&str> = None;
    let mut lines: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| Error::Parse { line, message };
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header `{s}`")))?
                .trim();
            section = Some(
                SECTIONS
                    .iter()
                    .map(|(n, _)| *n)
                    .find(|n| *n == name)
                    .ok_or_else(|| err(format!("unknown section [{name}]")))?,
            );
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{s}`")))?;
        let (key, value) = (key.trim(), strip_trailing_comment(value.trim()));
        let home = section_of(key).ok_or_else(|| err(format!("unknown key `{key}`")))?;
        if let Some(sec) = section {
            if sec != home {
                return Err(err(format!("key `{key}` belongs in [{home}], not [{sec}]")));
            }
        }
        if lines.insert(key.to_string(), line).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
        cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
    }
    cfg.sync_model();
    cfg.check(&lines)?;
    Ok(cfg)
}

// `# ...` after whitespace ends the value.
fn strip_trailing_comment(v: &str) -> &str {
    match v.find(" #") {
        Some(i) => v[..i].trim_end(),
        None if v.starts_with('#') => "",
        None => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.noise.sigma, 0.35);
        assert_eq!(cfg.train.optimizer.base_lr, 0.04);
        assert_eq!(parse_config(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn table_setting_is_accepted() {
        let cfg = parse_config("noise_type = ncmn1\nsigma = 0.35\nalpha0 = 0.04\n").unwrap();
        assert_eq!(cfg.model.noise_type, NoiseType::Ncmn1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_config("[noise]\n\nsigma = -0.1\n").unwrap_err();
        assert!(matches!(&e, Error::Parse { line: 3, message } if message.contains("σ ≥ 0")), "{e}");
        let e = parse_config("[model]\nbogus = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_config("[model]\ndepth = two\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_config("[model]\nsigma = 0.1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_config("depth = 3\ndepth = 4\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
        let e = parse_config("[model]\ndepth = 4\n[noise]\nnoise_type = ncmn2\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn echo_is_a_fixed_point() {
        let text = "# sweep base\n[model]\narchitecture = residual_2branch\ndepth = 5\n\
                    [noise]\nnoise_type = shake\nshake_alpha = 0.5\nshake_backward = even\n\
                    sigma = 0.1 # small\n[run]\nseeds = 4,5\n[data]\ntrain_files = a.bin, b.bin\n";
        let a = parse_config(text).unwrap();
        let echo = a.echo();
        let b = parse_config(&echo).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.echo(), echo);
        assert_eq!(b.seeds, vec![4, 5]);
        assert_eq!(b.model.shake.fixed_alpha, Some(0.5));
        assert_eq!(b.data.train_files, vec!["a.bin", "b.bin"]);
    }
}
