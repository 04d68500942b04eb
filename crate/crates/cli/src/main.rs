use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ncmn::config::{parse_config, ExperimentConfig};
use ncmn::diagnostics::{correlation_report, gradient_suite, model_snr, CorrelationReport, GradCheckConfig, LayerSnr};
use ncmn::experiment::{load_dataset, resolve_output_dir, run_experiment, sweep_noise_variance};
use ncmn::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "ncmn", version, about = "Multiplicative-noise training and diagnostics")]
#[command(after_help = "Relative output directories resolve against $NCMN_OUTPUT_ROOT when set.\n\
Exit codes: 0 success, 1 config error, 2 data error, 3 numeric divergence.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a configuration and write its reports.
    Run { config: PathBuf },
    /// Repeat a run over a grid of noise standard deviations.
    Sweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        sigma_grid: Vec<f64>,
        /// Width multipliers to sweep (defaults to the configured width).
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        widths: Vec<usize>,
    },
    /// Finite-difference check of every op and noisy layer composite.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Correlation and SNR reports for a saved model on the configured test data.
    Diagnose {
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Parse { line, message } => Error::Config(format!("{}:{line}: {message}", path.display())),
        other => other,
    })
}

fn run(config: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let out = resolve_output_dir(&cfg.output_dir);
    let exp = run_experiment(&cfg, &out)?;
    let agg = &exp.summary.aggregate;
    println!(
        "{}: eval error {:.4} ± {:.4} over {} seeds",
        out.display(),
        agg.eval_error.mean,
        agg.eval_error.std,
        exp.summary.runs.len()
    );
    if let Some(c) = agg.mean_abs_corr {
        println!("mean |corr| {:.4} ± {:.4}", c.mean, c.std);
    }
    exp.check()
}

fn sweep(config: &Path, grid: &[f64], widths: &[usize]) -> Result<()> {
    let cfg = read_config(config)?;
    let out = resolve_output_dir(&cfg.output_dir);
    let rows = sweep_noise_variance(&cfg, grid, widths, &out)?;
    println!("width  sigma2     mean_error  std_error");
    for r in rows {
        let mark = if r.argmin { "  *" } else { "" };
        println!("{:<6} {:<10.6} {:<11.4} {:.4}{mark}", r.width, r.sigma2, r.mean_error, r.std_error);
    }
    Ok(())
}

fn gradcheck(instances: usize, seed: u64) -> Result<()> {
    let entries = gradient_suite(instances, seed, &GradCheckConfig::default())?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:<4} max rel err {:.2e}  checked {:<5} truncated {}",
            e.name, status, e.max_rel_error, e.checked, e.truncated
        );
        failed += e.failures;
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} coordinates failed the finite-difference check")));
    }
    Ok(())
}

#[derive(Serialize)]
struct Diagnosis {
    correlation: CorrelationReport,
    snr: Vec<LayerSnr>,
}

fn diagnose(config: &Path, model: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let model = checkpoint::load(model)?;
    let (_, test) = load_dataset(&cfg.data)?;
    let n = cfg.diagnostics.batch.min(test.len());
    let (batch, _) = test.batch(&(0..n).collect::<Vec<_>>());
    let report = Diagnosis {
        correlation: correlation_report(&model, &batch)?,
        snr: model_snr(&model, &batch, &model.config().noise)?,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { config } => run(config),
        Command::Sweep { config, sigma_grid, widths } => sweep(config, sigma_grid, widths),
        Command::Gradcheck { instances, seed } => gradcheck(*instances, *seed),
        Command::Diagnose { config, model } => diagnose(config, model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ncmn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
