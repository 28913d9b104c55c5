use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lscd_tta::benchgen::dump_feature_csv;
use lscd_tta::harness::{
    emit_ablation_table, emit_report, emit_sweep, prepare_seed, load_task, run_ablation,
    run_experiment, run_sensitivity, ExperimentConfig, ReportFormat,
};

#[derive(Parser)]
#[command(name = "lscd-tta", version, about = "Online test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write source.csv and target.csv for one seed into the output directory.
    GenData(Common),
    /// Train a source model and save it as a checkpoint.
    TrainSource(Common),
    /// Run every configured method on every seed and write the report.
    Adapt(Common),
    /// Run the eight-row loss ablation.
    Ablate(Common),
    /// Run the composite loss over the configured weight grid.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (a directory for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::acceptance(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
            match out.extension().and_then(|e| e.to_str()) {
                Some("json") => cfg.format = ReportFormat::Json,
                Some("csv") => cfg.format = ReportFormat::Csv,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    path.with_file_name(format!("{stem}.{suffix}.{ext}"))
}

fn report_failures(failures: &[(u64, String)], seeds: usize) -> Result<()> {
    for (seed, msg) in failures {
        eprintln!("seed {seed} failed: {msg}");
    }
    if seeds > 0 && failures.len() == seeds {
        bail!("every seed failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let cfg = args.load()?;
            let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let seed = cfg.seeds[0];
            let (source, stream) = load_task(&cfg, seed)?;
            dump_feature_csv(&source, dir.join("source.csv"))?;
            dump_feature_csv(&stream.to_labeled(), dir.join("target.csv"))?;
            println!(
                "seed {seed}: {} source rows, {} target rows -> {}",
                source.len(),
                stream.len(),
                dir.display()
            );
        }
        Command::TrainSource(args) => {
            let mut cfg = args.load()?;
            let out = args
                .out
                .clone()
                .or_else(|| cfg.checkpoint.clone())
                .unwrap_or_else(|| PathBuf::from("source.ckpt"));
            cfg.checkpoint = None;
            let seed = cfg.seeds[0];
            let ctx = prepare_seed(&cfg, seed)?;
            ctx.network.save(&out)?;
            println!(
                "seed {seed}: source val accuracy {:.4}, target accuracy {:.4} -> {}",
                ctx.source_accuracy,
                ctx.frozen_target_accuracy()?,
                out.display()
            );
        }
        Command::Adapt(args) => {
            let cfg = args.load()?;
            let report = run_experiment(&cfg)?;
            for w in emit_report(&report.records, &cfg.out, cfg.format, &report.config_hash)? {
                eprintln!("warning: {w}");
            }
            for r in report.records.iter().filter(|r| r.seed == cfg.seeds[0]) {
                println!("{:<12} mean {:.4} std {}", r.method, r.acc_mean,
                    r.acc_std.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()));
            }
            report_failures(&report.failures, cfg.seeds.len())?;
            println!("report -> {}", cfg.out.display());
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let report = run_ablation(&cfg)?;
            emit_ablation_table(&report, &cfg.out)?;
            let records = sibling(&cfg.out, "records");
            let records = match cfg.format {
                ReportFormat::Csv => records,
                ReportFormat::Json => records.with_extension("json"),
            };
            for w in emit_report(&report.experiment.records, &records, cfg.format, &report.experiment.config_hash)? {
                eprintln!("warning: {w}");
            }
            for row in &report.rows {
                println!("{:<8} {:.4}", row.label, row.average);
            }
            report_failures(&report.experiment.failures, cfg.seeds.len())?;
            println!("table -> {}, records -> {}", cfg.out.display(), records.display());
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            let report = run_sensitivity(&cfg)?;
            emit_sweep(&report, &cfg.out, cfg.format)?;
            if let Some(best) = report.points.iter().find(|p| p.best) {
                let w = best.weights;
                println!(
                    "best: alpha={} beta={} tau={} epsilon={} mean {:.4}",
                    w.alpha, w.beta, w.tau, w.epsilon, best.mean
                );
            }
            report_failures(&report.failures, cfg.seeds.len())?;
            println!("sweep -> {}", cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("lscd-tta") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
