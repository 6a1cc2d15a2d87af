use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use gatecrush::checkpoint::{self, Checkpoint};
use gatecrush::config::{Precision, RunConfig};
use gatecrush::pipeline;
use gatecrush::report;
use gatecrush_core::models::ArchitectureSpec;

#[derive(Parser)]
#[command(name = "gatecrush", version, about = "Filter pruning with weight-dependent gates")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[arg(long, global = true, value_parser = ["latency", "flops", "l1"])]
    efficiency: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unpruned model.
    TrainBaseline,
    /// Time sampled encodings on this machine.
    CollectLatency,
    /// Fit the latency predictor on the collected dataset.
    TrainLpnet,
    /// Efficiency-aware gated training and export.
    Prune,
    /// Fine-tune the exported model.
    Finetune,
    /// Per-layer FLOPs of a checkpoint, an encoding or the full-width model.
    Flops {
        #[arg(long, conflicts_with = "encoding")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated kept-filter counts.
        #[arg(long)]
        encoding: Option<String>,
        /// Architecture name; defaults to the configured model.
        #[arg(long)]
        arch: Option<String>,
    },
    /// Accuracy/efficiency CSVs and plots for a run directory.
    Report {
        dir: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainBaseline => "train-baseline",
            Command::CollectLatency => "collect-latency",
            Command::TrainLpnet => "train-lpnet",
            Command::Prune => "prune",
            Command::Finetune => "finetune",
            Command::Flops { .. } => "flops",
            Command::Report { .. } => "report",
        }
    }
}

fn resolve(g: &Global) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = &g.precision {
        cfg.precision = if p == "f64" { Precision::F64 } else { Precision::F32 };
    }
    if let Some(e) = &g.efficiency {
        cfg.prune.efficiency = e.clone();
    }
    if let Some(a) = g.alpha {
        cfg.prune.alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("GATECRUSH_THREADS") {
        Ok(v) => {
            let n: usize = v.parse().with_context(|| format!("GATECRUSH_THREADS={v:?} is not a count"))?;
            if n == 0 {
                bail!("GATECRUSH_THREADS must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn flops_cmd(cfg: &RunConfig, ckpt: Option<&Path>, encoding: Option<&str>, arch: Option<&str>) -> anyhow::Result<()> {
    let (spec, counts) = match ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let (model, _) = checkpoint::model_from_checkpoint::<f64>(&ck, p)?;
            (model.spec.clone(), model.widths.clone())
        }
        None => {
            let spec = ArchitectureSpec::by_name(arch.unwrap_or(&cfg.model.arch), cfg.model.classes, cfg.model.resolution)?;
            let counts = match encoding {
                Some(e) => report::split_encoding(e).with_context(|| format!("bad encoding {e:?}"))?,
                None => spec.geometry()?.full_width(),
            };
            (spec, counts)
        }
    };
    let (table, total) = pipeline::flops_table(&spec, &counts)?;
    print!("{table}");
    println!("# {}: {:.1}M FLOPs (1 MAC = 1 FLOP)", spec.name, total as f64 / 1e6);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.global)?;
    let _threads = threads()?;
    let out = &cli.global.out;
    let cmd = cli.command;
    if !matches!(cmd, Command::Flops { .. } | Command::Report { .. }) {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        cfg.write_resolved(out, cmd.name())?;
    }
    let f64_mode = cfg.precision == Precision::F64;
    match cmd {
        Command::TrainBaseline => {
            let s = if f64_mode {
                pipeline::train_baseline::<f64>(&cfg, out)?
            } else {
                pipeline::train_baseline::<f32>(&cfg, out)?
            };
            println!("accuracy={} flops={}", s.accuracy, s.flops);
        }
        Command::CollectLatency => {
            let n = pipeline::collect_latency(&cfg, out)?;
            println!("samples={n}");
        }
        Command::TrainLpnet => {
            let s = pipeline::train_lpnet_cmd(&cfg, out)?;
            println!("test_error={} train_error={} samples={}", s.test_error, s.train_error, s.samples);
        }
        Command::Prune => {
            let s = if f64_mode {
                pipeline::prune::<f64>(&cfg, out)?
            } else {
                pipeline::prune::<f32>(&cfg, out)?
            };
            println!(
                "accuracy={} flops={} encoding={}",
                s.export.accuracy,
                s.export.flops,
                report::join_encoding(&s.export.encoding)
            );
        }
        Command::Finetune => {
            let s = if f64_mode {
                pipeline::finetune::<f64>(&cfg, out)?
            } else {
                pipeline::finetune::<f32>(&cfg, out)?
            };
            println!(
                "accuracy={} post_export_accuracy={} delta={}",
                s.accuracy,
                s.post_export_accuracy,
                s.accuracy - s.post_export_accuracy
            );
        }
        Command::Flops { checkpoint, encoding, arch } => {
            flops_cmd(&cfg, checkpoint.as_deref(), encoding.as_deref(), arch.as_deref())?;
        }
        Command::Report { dir } => {
            let dir = dir.as_deref().unwrap_or(out);
            for f in report::write_report(dir)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
