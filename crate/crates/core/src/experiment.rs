//! Multi-seed experiments, noise-variance sweeps and their report files.
//!
//! A run directory holds
//!
//! * `epochs.csv`: one row per epoch per seed, columns [`CSV_HEADER`];
//! * `summary.json`: configuration echo, per-seed results, mean and
//!   population standard deviation across seeds, diagnostics, and a final
//!   `metadata` object (tool version, creation time, thread count);
//! * `seed-<s>/`: that seed's `epochs.csv` and `model.ckpt`.
//!
//! Everything except the `metadata` object is reproducible byte for byte.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataConfig, DatasetKind, ExperimentConfig};
use crate::data::{self, Dataset, TextureSpec};
use crate::diagnostics::{correlation_report, model_snr, CorrelationReport, LayerSnr};
use crate::error::{Error, Result};
use crate::par;
use crate::training::{build_model, train, DivergenceInfo, EpochRecord, Model, TrainReport};

/// Overrides the directory that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_ENV: &str = "NCMN_OUTPUT_ROOT";

pub const CSV_HEADER: [&str; 7] = [
    "seed",
    "epoch",
    "lr",
    "train_loss",
    "train_accuracy",
    "eval_loss",
    "eval_accuracy",
];

pub const SWEEP_HEADER: [&str; 6] = ["width", "sigma", "sigma2", "mean_error", "std_error", "argmin"];

pub fn resolve_output_dir(output_dir: &str) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(output_dir),
        _ => PathBuf::from(output_dir),
    }
}

/// Train and test sets, both standardized with the training set's
/// per-channel statistics.
pub fn load_dataset(cfg: &DataConfig) -> Result<(Dataset, Dataset)> {
    let (mut tr, mut te) = match cfg.dataset {
        DatasetKind::SyntheticBlobs => {
            let all = data::synthetic_blobs(cfg.classes, cfg.dim, cfg.train_size + cfg.test_size, cfg.seed)?;
            all.split_at(cfg.train_size)?
        }
        DatasetKind::SyntheticTextures => {
            let spec = TextureSpec {
                classes: cfg.classes,
                size: cfg.image_size,
                channels: cfg.channels,
                pixel_noise: cfg.pixel_noise,
            };
            let all = data::synthetic_textures(&spec, cfg.train_size + cfg.test_size, cfg.seed)?;
            all.split_at(cfg.train_size)?
        }
        DatasetKind::Cifar10Binary => (
            data::load_cifar10(&cfg.train_files, Some(cfg.train_size))?,
            data::load_cifar10(&cfg.test_files, Some(cfg.test_size))?,
        ),
    };
    let stats = tr.channel_stats();
    tr.standardize(&stats)?;
    te.standardize(&stats)?;
    Ok((tr, te))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> Stat {
    if xs.is_empty() {
        return Stat { mean: f64::NAN, std: f64::NAN };
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Clone, Debug)]
pub struct SeedResult {
    pub report: TrainReport,
    pub correlation: Option<CorrelationReport>,
    pub snr: Option<Vec<LayerSnr>>,
    pub model: Model,
}

fn diagnostic_batch(cfg: &ExperimentConfig, test: &Dataset) -> crate::tensor::Tensor {
    let n = cfg.diagnostics.batch.min(test.len());
    let idx: Vec<usize> = (0..n).collect();
    test.batch(&idx).0
}

/// Trains one seed and runs the enabled diagnostics on its final model.
pub fn run_seed(cfg: &ExperimentConfig, data: &(Dataset, Dataset), seed: u64) -> Result<SeedResult> {
    let mut model = build_model(&cfg.model, seed)?;
    let report = train(&mut model, &data.0, &data.1, &cfg.train, seed)?;
    let healthy = report.divergence.is_none();
    let batch = diagnostic_batch(cfg, &data.1);
    let correlation = (healthy && cfg.diagnostics.correlation)
        .then(|| correlation_report(&model, &batch))
        .transpose()?;
    let snr = (healthy && cfg.diagnostics.snr)
        .then(|| model_snr(&model, &batch, &cfg.model.noise))
        .transpose()?;
    Ok(SeedResult { report, correlation, snr, model })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_eval_accuracy: f64,
    pub final_eval_error: f64,
    pub mean_abs_corr: Option<f64>,
    pub divergence: Option<DivergenceInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub eval_accuracy: Stat,
    pub eval_error: Stat,
    pub mean_abs_corr: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool_version: String,
    pub created_unix: u64,
    pub threads: usize,
}

impl Metadata {
    pub fn now() -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            threads: par::threads(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub seed: u64,
    pub correlation: Option<CorrelationReport>,
    pub snr: Option<Vec<LayerSnr>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: String,
    pub parameter_count: usize,
    pub runs: Vec<RunSummary>,
    pub aggregate: Aggregate,
    pub diagnostics: Vec<SeedDiagnostics>,
    /// Not reproducible across invocations.
    pub metadata: Metadata,
}

#[derive(Serialize)]
struct CsvRow {
    seed: u64,
    epoch: usize,
    lr: f64,
    train_loss: Option<f64>,
    train_accuracy: Option<f64>,
    eval_loss: f64,
    eval_accuracy: f64,
}

fn write_csv<'a>(path: &Path, rows: impl IntoIterator<Item = (u64, &'a EpochRecord)>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for (seed, e) in rows {
        w.serialize(CsvRow {
            seed,
            epoch: e.epoch,
            lr: e.lr,
            train_loss: e.train_loss,
            train_accuracy: e.train_accuracy,
            eval_loss: e.eval_loss,
            eval_accuracy: e.eval_accuracy,
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Drops the `metadata` object so that two summaries can be compared.
pub fn strip_metadata(summary_json: &str) -> Result<String> {
    let mut v: serde_json::Value =
        serde_json::from_str(summary_json).map_err(|e| Error::Data(format!("summary is not JSON: {e}")))?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("metadata");
    }
    Ok(serde_json::to_string_pretty(&v).expect("value serializes"))
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub summary: Summary,
    pub seeds: Vec<SeedResult>,
}

impl Experiment {
    /// `Err(Error::Divergence)` for the first diverged seed.
    pub fn check(&self) -> Result<()> {
        self.seeds.iter().try_for_each(|s| s.report.check())
    }
}

/// Runs every seed (in parallel), writes the report files into `out`, and
/// returns the results. Diverged seeds are reported, not raised; use
/// [`Experiment::check`].
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Experiment> {
    let data = load_dataset(&cfg.data)?;
    run_experiment_on(cfg, &data, out)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, data: &(Dataset, Dataset), out: &Path) -> Result<Experiment> {
    if cfg.seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    create_dir(out)?;
    let results: Vec<Result<SeedResult>> = par::map_indexed(cfg.seeds.len(), |i| {
        let seed = cfg.seeds[i];
        let r = run_seed(cfg, data, seed)?;
        let dir = out.join(format!("seed-{seed}"));
        create_dir(&dir)?;
        write_csv(&dir.join("epochs.csv"), r.report.epochs.iter().map(|e| (seed, e)))?;
        checkpoint::save(&r.model, dir.join("model.ckpt"))?;
        Ok(r)
    });
    let seeds = results.into_iter().collect::<Result<Vec<_>>>()?;

    write_csv(
        &out.join("epochs.csv"),
        seeds.iter().flat_map(|s| s.report.epochs.iter().map(move |e| (s.report.seed, e))),
    )?;
    let runs: Vec<RunSummary> = seeds
        .iter()
        .map(|s| {
            let acc = s.report.final_eval_accuracy().unwrap_or(f64::NAN);
            RunSummary {
                seed: s.report.seed,
                epochs_completed: s.report.epochs.len().saturating_sub(1),
                final_eval_accuracy: acc,
                final_eval_error: 1.0 - acc,
                mean_abs_corr: s.correlation.as_ref().map(CorrelationReport::overall),
                divergence: s.report.divergence.clone(),
            }
        })
        .collect();
    let accs: Vec<f64> = runs.iter().map(|r| r.final_eval_accuracy).collect();
    let errs: Vec<f64> = runs.iter().map(|r| r.final_eval_error).collect();
    let corrs: Option<Vec<f64>> = runs.iter().map(|r| r.mean_abs_corr).collect();
    let summary = Summary {
        config: cfg.echo(),
        parameter_count: seeds[0].model.parameter_count(),
        aggregate: Aggregate {
            eval_accuracy: mean_std(&accs),
            eval_error: mean_std(&errs),
            mean_abs_corr: corrs.map(|c| mean_std(&c)),
        },
        runs,
        diagnostics: seeds
            .iter()
            .map(|s| SeedDiagnostics {
                seed: s.report.seed,
                correlation: s.correlation.clone(),
                snr: s.snr.clone(),
            })
            .collect(),
        metadata: Metadata::now(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(Experiment { summary, seeds })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub width: usize,
    pub sigma: f64,
    pub sigma2: f64,
    pub mean_error: f64,
    pub std_error: f64,
    /// Lowest mean error among the rows of this width.
    pub argmin: bool,
}

/// One experiment per `(width, σ)`, written to `out/w<width>-s<σ>/`, plus
/// `sweep.csv` and `sweep.json` tables. An empty `widths` uses the
/// configured width.
pub fn sweep_noise_variance(cfg: &ExperimentConfig, sigma_grid: &[f64], widths: &[usize], out: &Path) -> Result<Vec<SweepRow>> {
    if sigma_grid.is_empty() {
        return Err(Error::config("sigma grid is empty"));
    }
    if let Some(s) = sigma_grid.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::config(format!("sigma {s} must satisfy σ ≥ 0")));
    }
    let widths = if widths.is_empty() { vec![cfg.model.width] } else { widths.to_vec() };
    if widths.contains(&0) {
        return Err(Error::config("widths must be positive"));
    }
    let data = load_dataset(&cfg.data)?;
    create_dir(out)?;
    let points: Vec<(usize, f64)> = widths
        .iter()
        .flat_map(|&w| sigma_grid.iter().map(move |&s| (w, s)))
        .collect();
    let mut rows = Vec::with_capacity(points.len());
    for &(width, sigma) in &points {
        let mut c = cfg.clone();
        c.model.width = width;
        c.model.noise.sigma = sigma;
        c.model.validate()?;
        let exp = run_experiment_on(&c, &data, &out.join(format!("w{width}-s{sigma}")))?;
        exp.check()?;
        let err = exp.summary.aggregate.eval_error;
        rows.push(SweepRow {
            width,
            sigma,
            sigma2: sigma * sigma,
            mean_error: err.mean,
            std_error: err.std,
            argmin: false,
        });
    }
    for &w in &widths {
        let best = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.width == w)
            .min_by(|a, b| a.1.mean_error.total_cmp(&b.1.mean_error))
            .map(|(i, _)| i);
        if let Some(i) = best {
            rows[i].argmin = true;
        }
    }
    let path = out.join("sweep.csv");
    let io = |e: csv::Error| Error::io(&path, std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(io)?;
    w.write_record(SWEEP_HEADER).map_err(io)?;
    for r in &rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let s = mean_std(&[0.90, 0.92, 0.94]);
        assert!((s.mean - 0.92).abs() < 1e-12);
        assert!((s.std - 0.0163).abs() < 5e-5);
    }
}
