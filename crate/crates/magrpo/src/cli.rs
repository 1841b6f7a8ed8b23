//! Command-line surface.
//!
//! Subcommands: `train`, `ablate`, `probe`, `verify`, `cost`. Exit code 0 on
//! success, 1 on configuration errors (including usage mistakes), 2 on runtime
//! errors. The `DRMAS_SEED` environment variable overrides the config seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::advantage::NormalizationMode;
use crate::config_file::{load_config, FileConfig};
use crate::core::CoreError;
use crate::diagnostics::{inflation_probe, second_moment_verification, ProbePoint};
use crate::rng::{substream, Purpose};
use crate::telemetry::{
    cost_estimate, format_float, read_manifest_costs, write_manifest, write_records,
    TelemetryError,
};
use crate::trainer::{run_ablation, run_training, TrainerError};

pub const USAGE: &str = "\
usage: magrpo <subcommand> <path>

subcommands:
  train  <config>    run the training loop, write train_records.csv and run_manifest.txt
  ablate <config>    run all four normalization modes, write one CSV per mode plus ablation_summary.csv
  probe  <config>    run the gradient-inflation sweep, write probe.csv
  verify <config>    check the second-moment decomposition on random batches
  cost   <manifest>  price the token totals recorded in a run manifest
";

const RESIDUAL_BOUND: f64 = 1e-9;

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<TelemetryError> for CliError {
    fn from(e: TelemetryError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Core(CoreError::InvalidConfig { .. }) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn load(path: &str) -> Result<FileConfig, CliError> {
    let mut fc = load_config(Path::new(path)).map_err(|e| CliError::Config(e.to_string()))?;
    if let Ok(seed) = std::env::var("DRMAS_SEED") {
        fc.run.seed = seed
            .parse()
            .map_err(|e| CliError::Config(format!("DRMAS_SEED: bad value {seed:?}: {e}")))?;
    }
    Ok(fc)
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_train(path: &str) -> Result<(), CliError> {
    let fc = load(path)?;
    let (records, state) = run_training(fc.run)?;
    ensure_out_dir(&fc.out_dir)?;
    let records_path = fc.out_dir.join("train_records.csv");
    write_records(&records, &records_path)?;
    write_manifest(&state, &fc.prices, &fc.out_dir.join("run_manifest.txt"))?;
    let final_reward = crate::trainer::final_window_mean_reward(&records);
    println!(
        "wrote {} ({} iterations, final window mean reward {:.4})",
        records_path.display(),
        records.len(),
        final_reward
    );
    Ok(())
}

fn cmd_ablate(path: &str) -> Result<(), CliError> {
    let fc = load(path)?;
    let outcomes = run_ablation(&fc.run, &NormalizationMode::ALL)?;
    ensure_out_dir(&fc.out_dir)?;
    let mut summary = String::from("mode,final_mean_reward,max_grad_norm\n");
    for outcome in &outcomes {
        let mode_path = fc
            .out_dir
            .join(format!("ablation_{}.csv", outcome.mode.token()));
        write_records(&outcome.records, &mode_path)?;
        let _ = writeln!(
            summary,
            "{},{},{}",
            outcome.mode.token(),
            format_float(outcome.final_mean_reward),
            format_float(outcome.max_grad_norm),
        );
        println!(
            "{}: final mean reward {:.4}, max grad norm {:.4}",
            outcome.mode.token(),
            outcome.final_mean_reward,
            outcome.max_grad_norm
        );
    }
    let summary_path = fc.out_dir.join("ablation_summary.csv");
    std::fs::write(&summary_path, summary)
        .map_err(|e| CliError::Runtime(format!("cannot write summary: {e}")))?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_probe(path: &str) -> Result<(), CliError> {
    let fc = load(path)?;
    let mut rng = substream(fc.run.seed, Purpose::Probe, 0, 0, 0);
    let results = inflation_probe(&ProbePoint::DEFAULT_SWEEP, fc.probe_samples, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    ensure_out_dir(&fc.out_dir)?;
    let mut csv = String::from("analytic_multiplier,measured_ratio\n");
    for r in &results {
        let _ = writeln!(
            csv,
            "{},{}",
            format_float(r.analytic_multiplier),
            format_float(r.measured_ratio)
        );
        println!(
            "multiplier {:8.4} -> measured ratio {:8.4}",
            r.analytic_multiplier, r.measured_ratio
        );
    }
    let probe_path = fc.out_dir.join("probe.csv");
    std::fs::write(&probe_path, csv)
        .map_err(|e| CliError::Runtime(format!("cannot write probe results: {e}")))?;
    println!("wrote {}", probe_path.display());
    Ok(())
}

fn cmd_verify(path: &str) -> Result<(), CliError> {
    let fc = load(path)?;
    let max_relative = second_moment_verification(fc.verify_batches, fc.run.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "max relative residual over {} batches: {:.3e}",
        fc.verify_batches, max_relative
    );
    if max_relative <= RESIDUAL_BOUND {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "second-moment identity violated: residual {max_relative:.3e} > {RESIDUAL_BOUND:e}"
        )))
    }
}

fn cmd_cost(path: &str) -> Result<(), CliError> {
    let (tokens, prices) = read_manifest_costs(Path::new(path))?;
    let total = cost_estimate(&tokens, &prices)?;
    for (model, count) in &tokens {
        println!("{model}: {count} tokens");
    }
    println!("total_cost = {total:.6}");
    Ok(())
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    let (subcommand, rest) = match args.split_first() {
        Some((s, rest)) => (s.as_str(), rest),
        None => return Err(CliError::Config(format!("missing subcommand\n{USAGE}"))),
    };
    let path = |what: &str| -> Result<&str, CliError> {
        rest.first()
            .map(|s| s.as_str())
            .ok_or_else(|| CliError::Config(format!("{subcommand}: missing {what}\n{USAGE}")))
    };
    match subcommand {
        "train" => cmd_train(path("config path")?),
        "ablate" => cmd_ablate(path("config path")?),
        "probe" => cmd_probe(path("config path")?),
        "verify" => cmd_verify(path("config path")?),
        "cost" => cmd_cost(path("manifest path")?),
        other => Err(CliError::Config(format!(
            "unknown subcommand {other:?}\n{USAGE}"
        ))),
    }
}

/// Runs the CLI against already-split arguments (without the binary name) and
/// returns the process exit code.
pub fn run_cli(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
