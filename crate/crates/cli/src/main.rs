use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flatlora::config::load_config;
use flatlora::experiment::{checkpoint_landscape, output_root, run_experiment, sweep, ResultRow, RunStatus, Split, SweepParam};
use flatlora::validate;

/// Low-rank adapter training under random weight perturbation, SAM baselines and flatness diagnostics.
///
/// Outputs go under $FLATLORA_OUTPUT, else the config's `output_dir`, else `./runs`.
#[derive(Parser)]
#[command(name = "flatlora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and append the results table.
    Run { config: PathBuf },
    /// Run a config once per value of sigma, rho or rank.
    Sweep {
        config: PathBuf,
        #[arg(long, value_parser = parse_param)]
        param: SweepParam,
        /// Comma-separated grid, e.g. 0,0.05,0.1.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
    },
    /// Loss surface around a checkpoint along filter-normalized directions.
    Landscape {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        dims: u8,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Points per axis (odd); defaults to 201 in 1D and 41 in 2D.
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Output prefix; writes <prefix>.csv and <prefix>.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; exits nonzero if any check fails.
    Validate {
        /// Only these criteria (1-based).
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
}

fn parse_param(s: &str) -> Result<SweepParam, String> {
    s.parse().map_err(|e: flatlora::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: flatlora::Error| e.to_string())
}

fn report(rows: &[ResultRow]) -> bool {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("{:<10} {:>5} {:>8} {:>8} {:>8} {:>9} {:>8}  status", "method", "seed", "sigma", "rho", "test_acc", "sharpness", "acc_gap");
    for r in rows {
        println!(
            "{:<10} {:>5} {:>8} {:>8} {:>8} {:>9} {:>8}  {}",
            r.method.name(),
            r.seed,
            fmt(r.sigma),
            fmt(r.rho),
            fmt(r.test_accuracy),
            fmt(r.sharpness),
            fmt(r.accuracy_gap),
            match (&r.status, &r.error) {
                (RunStatus::Ok, _) => "ok".to_string(),
                (RunStatus::Failed, e) => format!("failed: {}", e.as_deref().unwrap_or("unknown")),
            }
        );
    }
    rows.iter().all(|r| r.status == RunStatus::Ok)
}

fn landscape_prefix(checkpoint: &Path, dims: u8) -> PathBuf {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    checkpoint.with_file_name(format!("{stem}-landscape-{dims}d"))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            let rows = run_experiment(&cfg)?;
            println!("results appended to {}", output_root(&cfg).join("results.csv").display());
            Ok(report(&rows))
        }
        Command::Sweep { config, param, values } => {
            let cfg = load_config(&config).with_context(|| format!("loading {}", config.display()))?;
            let out = sweep(&cfg, param, &values)?;
            let ok = report(&out.rows);
            for p in &out.points {
                println!(
                    "{}={} runs {} failed {} test_acc {:.4}±{:.4} sharpness {:.4}±{:.4}",
                    param.name(),
                    p.value,
                    p.runs,
                    p.failed,
                    p.test_accuracy_mean.unwrap_or(f64::NAN),
                    p.test_accuracy_std.unwrap_or(f64::NAN),
                    p.sharpness_mean.unwrap_or(f64::NAN),
                    p.sharpness_std.unwrap_or(f64::NAN),
                );
            }
            Ok(ok)
        }
        Command::Landscape { checkpoint, dims, radius, grid, seed, split, out } => {
            let resolution = grid.unwrap_or(if dims == 1 { 201 } else { 41 });
            let g = checkpoint_landscape(&checkpoint, dims.into(), radius, resolution, seed, split)?;
            let prefix = out.unwrap_or_else(|| landscape_prefix(&checkpoint, dims));
            let (csv, json) = (prefix.with_extension("csv"), prefix.with_extension("json"));
            g.to_csv(&csv)?;
            g.to_json(&json)?;
            let finite = g.values.iter().filter(|v| v.is_finite()).count();
            println!(
                "{} cells ({finite} finite), origin loss {:.6}, written to {} and {}",
                g.values.len(),
                g.origin_loss,
                csv.display(),
                json.display()
            );
            Ok(true)
        }
        Command::Validate { only } => {
            let ids: Vec<usize> = if only.is_empty() { (1..=validate::TITLES.len()).collect() } else { only };
            if let Some(bad) = ids.iter().find(|&&i| i == 0 || i > validate::TITLES.len()) {
                bail!("no criterion {bad}; valid ids are 1..={}", validate::TITLES.len());
            }
            let mut ok = true;
            for id in ids {
                let c = validate::check(id);
                ok &= c.passed;
                println!("{c}");
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
