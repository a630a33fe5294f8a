//! Command-line surface: `rast train`, `rast eval`, `rast bench-store`,
//! and `rast inspect-store`.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for data or
//! file format problems, 1 for anything else. Metrics go to stdout as
//! JSON, the benchmark as CSV; progress and diagnostics go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rast_core::bench::{bench_store, BenchConfig, BenchReport};
use rast_core::config::{OutputType, Precision, RunConfig};
use rast_core::data::{load_dataset, Split};
use rast_core::store::{snapshot, StorePolicy};
use rast_core::train::{evaluate, load_checkpoint, train, RunManifest};
use rast_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rast", version, about = "Retrieval-augmented spatio-temporal forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint to a run directory.
    Train(TrainArgs),
    /// Evaluate a run directory's checkpoint on one split.
    Eval(EvalArgs),
    /// Compare Flat and IVF search latency and recall across bank sizes.
    BenchStore(BenchArgs),
    /// Summarize a bank snapshot: entry count and momentum/age histograms.
    InspectStore(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML or JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// STB file path or a `synthetic:<kind>[:k=v,...]` spec.
    #[arg(long)]
    data: String,
    /// Run directory for the checkpoint, bank snapshots, and logs.
    #[arg(long)]
    out: PathBuf,
    /// Adjacency CSV (`src,dst,weight` lines); a ring graph when omitted.
    #[arg(long)]
    adj: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured ablation mode.
    #[arg(long, value_name = "full|query_only|retrieval_only|no_mlp")]
    output_type: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory produced by `rast train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Split to score: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Overrides the data spec recorded in the run manifest.
    #[arg(long)]
    data: Option<String>,
    /// Adjacency CSV override for STB data.
    #[arg(long)]
    adj: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated bank populations to measure.
    #[arg(long, default_value = "1000,8000")]
    sizes: String,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Probe budget held fixed at every population so probed work grows
    /// sublinearly with the bank.
    #[arg(long, default_value_t = 12, conflicts_with = "scaled_probes")]
    n_probe: usize,
    /// Use the store's own probe schedule (ceil of a quarter of the list
    /// count) instead of a fixed budget.
    #[arg(long)]
    scaled_probes: bool,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Bank snapshot file (`spatial.bank` or `temporal.bank`).
    #[arg(long)]
    snapshot: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::BenchStore(args) => cmd_bench(args),
        Command::InspectStore(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Reads a config file by extension; no file means library defaults.
fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        _ => {
            return Err(Error::config(format!(
                "config {} must end in .toml or .json",
                path.display()
            )))
        }
    };
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(ot) = &args.output_type {
        cfg.output_type = OutputType::parse(ot)?;
    }
    cfg.validate()?;
    let bundle = load_dataset(&args.data, args.adj.as_deref(), &cfg)?;
    eprintln!(
        "training on {} ({} nodes, {} steps, {} windows), mode {}",
        bundle.name(),
        bundle.num_nodes(),
        bundle.num_steps(),
        bundle.num_windows(),
        cfg.output_type.name()
    );
    let summary = match cfg.precision {
        Precision::F32 => run_train::<f32>(&cfg, &bundle, &args.out)?,
        Precision::F64 => run_train::<f64>(&cfg, &bundle, &args.out)?,
    };
    println!("{summary}");
    Ok(())
}

fn run_train<S: rast_core::Scalar>(
    cfg: &RunConfig,
    bundle: &rast_core::data::DatasetBundle,
    out: &Path,
) -> Result<String> {
    let output = train::<S>(cfg, bundle, Some(out))?;
    let r = &output.report;
    let summary = serde_json::json!({
        "out_dir": out.display().to_string(),
        "epochs_run": r.epochs_run,
        "best_epoch": r.best_epoch,
        "best_val_mae": r.best_val_mae,
        "stopped_early": r.stopped_early,
        "skipped_steps": r.skipped_steps,
        "rebuild_epochs": r.rebuild_epochs,
        "spatial_entries": output.spatial.len(),
        "temporal_entries": output.temporal.len(),
    });
    Ok(serde_json::to_string_pretty(&summary).expect("summary serializes"))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split = Split::parse(&args.split)?;
    let manifest: RunManifest =
        serde_json::from_slice(&fs::read(args.ckpt.join("run.json")).map_err(|e| {
            Error::data(format!("cannot read {}: {e}", args.ckpt.join("run.json").display()))
        })?)
        .map_err(|e| Error::data(format!("run.json: {e}")))?;
    let report = match manifest.config.precision {
        Precision::F32 => run_eval::<f32>(&args, split)?,
        Precision::F64 => run_eval::<f64>(&args, split)?,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("metrics serialize"));
    Ok(())
}

fn run_eval<S: rast_core::Scalar>(
    args: &EvalArgs,
    split: Split,
) -> Result<rast_core::metrics::MetricsReport> {
    let (manifest, model, spatial, temporal) = load_checkpoint::<S>(&args.ckpt)?;
    let data = args.data.as_deref().unwrap_or(&manifest.data);
    let bundle = load_dataset(data, args.adj.as_deref(), &manifest.config)?;
    evaluate(&model, Some((&spatial, &temporal)), &bundle, split, &manifest.config)
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut sizes = Vec::new();
    for part in args.sizes.split(',').filter(|p| !p.is_empty()) {
        let m: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad bank size {part:?} in --sizes")))?;
        if m == 0 {
            return Err(Error::config("bank sizes must be >= 1"));
        }
        sizes.push(m);
    }
    if sizes.is_empty() {
        return Err(Error::config("--sizes must list at least one population"));
    }
    let cfg = BenchConfig {
        sizes,
        dim: args.dim,
        clusters: args.clusters,
        k: args.k,
        n_probe: if args.scaled_probes { None } else { Some(args.n_probe) },
        seed: args.seed,
        ..BenchConfig::default()
    };
    let report: BenchReport = bench_store::<f32>(&cfg)?;
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(path) = &args.out {
        fs::write(path, &csv)?;
    }
    eprintln!("ivf/flat latency ratio strictly decreasing: {}", report.ratio_decreasing);
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    // f64 loading widens f32 snapshots losslessly, so one width serves
    // both; the policy only matters for future mutations, not inspection.
    let bank = snapshot::load::<f64>(&args.snapshot, StorePolicy::default())?;
    println!("kind: {}", bank.kind().name());
    println!("entries: {}", bank.len());
    println!("dim: {}", bank.dim());
    if bank.is_empty() {
        return Ok(());
    }
    let momenta: Vec<f64> = bank.entries().iter().map(|e| e.momentum).collect();
    print_histogram("momentum", &momenta);
    let newest = bank.entries().iter().map(|e| e.epoch_stamp).max().unwrap_or(0);
    let ages: Vec<f64> = bank
        .entries()
        .iter()
        .map(|e| (newest - e.epoch_stamp) as f64)
        .collect();
    print_histogram("age (epochs before newest entry)", &ages);
    Ok(())
}

/// Ten equal-width bins over the observed range; a degenerate range
/// collapses to a single bin.
fn print_histogram(label: &str, values: &[f64]) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("{label}: min {min:.4}, max {max:.4}");
    if min == max {
        println!("  [{min:.4}, {max:.4}] {}", values.len());
        return;
    }
    let bins = 10usize;
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let idx = (((v - min) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(1).max(1);
    for (i, count) in counts.iter().enumerate() {
        let lo = min + i as f64 * width;
        let hi = lo + width;
        let bar = "#".repeat(count * 40 / peak);
        println!("  [{lo:>10.4}, {hi:>10.4}) {count:>6} {bar}");
    }
}
