//! Command-line surface. Exit codes: 0 success, 1 internal error,
//! 2 configuration error, 3 data error, 4 numerical abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use splitmask_core::diagnostics::gradient_suite;

use crate::config::{RunConfig, RunMode};
use crate::dataset::export_dataset;
use crate::error::{Error, Result};
use crate::formats::save_vocabulary;
use crate::plot::{plot_file, PlotKind};
use crate::run::{ensure_dir, execute, tokenizer};
use crate::sweep::{run_sweep, workers_from_env, SweepSpec};

#[derive(Debug, Parser)]
#[command(name = "splitmask", version, about = "Split-mask denoising pre-training at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `pretrain.epochs=50`; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; every artifact is written below it.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset to PNG folders with manifests.
    Synth(RunArgs),
    /// Fit (or load) the tokenizer and write `vocab.pvoc`.
    FitTokenizer(RunArgs),
    /// Pre-train from scratch.
    Pretrain(RunArgs),
    /// Finetune a checkpoint (or a random initialization) with a classifier head.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probes on frozen features of every encoder layer.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a grid of configurations; completed cells are skipped.
    Sweep {
        /// Sweep spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Override applied to every cell; repeatable.
        #[arg(long = "set", short = 's', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render a CSV log as an SVG figure.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        input: PathBuf,
        /// Column for the x axis of sweep plots (defaults to the first axis).
        #[arg(long)]
        x: Option<String>,
        /// Column for the y axis of sweep plots.
        #[arg(long)]
        y: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn load(args: &RunArgs, mode: Option<RunMode>, checkpoint: &Option<PathBuf>) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    if let Some(mode) = mode {
        let name = match mode {
            RunMode::Pretrain => "pretrain",
            RunMode::Finetune => "finetune",
            RunMode::Probe => "probe",
        };
        overrides.push(format!("mode={:?}", name));
    }
    let mut cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    if let Some(c) = checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    Ok(cfg)
}

fn print_rows(rows: &[crate::metrics::EvalRow]) {
    for r in rows {
        println!("{}\t{}", r.metric, r.value);
    }
}

fn synth(args: &RunArgs) -> Result<()> {
    let cfg = load(args, None, &None)?;
    ensure_dir(&args.out)?;
    cfg.write_resolved(&args.out)?;
    let (train, test) = cfg.data.load()?;
    let a = export_dataset(&args.out, "train", &train)?;
    let b = export_dataset(&args.out, "test", &test)?;
    println!("{}\n{}", a.display(), b.display());
    Ok(())
}

fn fit_tokenizer(args: &RunArgs) -> Result<()> {
    let cfg = load(args, None, &None)?;
    ensure_dir(&args.out)?;
    cfg.write_resolved(&args.out)?;
    let (train, _) = cfg.data.load()?;
    let vocab = tokenizer(&cfg, &train)?;
    let path = args.out.join("vocab.pvoc");
    save_vocabulary(&path, &vocab)?;
    println!("{}", path.display());
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let suite = gradient_suite(seed)?;
    println!("{:<20} {:>14} {:>10} {:>8}", "op", "max_rel_error", "tol", "status");
    let mut failed = Vec::new();
    for e in &suite {
        let r = &e.report;
        println!(
            "{:<20} {:>14.3e} {:>10.0e} {:>8}",
            e.name,
            r.max_rel_error,
            r.tol,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(e.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn sweep(spec_path: &Path, overrides: &[String], out: &Path) -> Result<i32> {
    let (spec, base) = SweepSpec::load(spec_path)?;
    let cells = spec.cells(&base, overrides)?;
    let report = run_sweep(&spec, cells, out, workers_from_env())?;
    println!(
        "{} cells, {} run, {} skipped, {} failed -> {}",
        report.results.len(),
        report.executed(),
        report.results.len() - report.executed(),
        report.failed(),
        report.results_path.display()
    );
    for r in &report.results {
        if let Err(e) = &r.outcome {
            eprintln!("cell {} ({}): {}", r.cell.index, r.cell.hash, e);
        }
    }
    Ok(if report.failed() > 0 { 1 } else { 0 })
}

/// Runs a parsed command and returns its exit code. Errors are reported on
/// stderr as one machine-readable line.
pub fn main_with(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Synth(a) => synth(a).map(|_| 0),
        Command::FitTokenizer(a) => fit_tokenizer(a).map(|_| 0),
        Command::Pretrain(a) => load(a, Some(RunMode::Pretrain), &None).and_then(|c| execute(&c, &a.out)).map(|r| {
            print_rows(&r);
            0
        }),
        Command::Finetune { run, checkpoint } => load(run, Some(RunMode::Finetune), checkpoint)
            .and_then(|c| execute(&c, &run.out))
            .map(|r| {
                print_rows(&r);
                0
            }),
        Command::Probe { run, checkpoint } => load(run, Some(RunMode::Probe), checkpoint)
            .and_then(|c| execute(&c, &run.out))
            .map(|r| {
                print_rows(&r);
                0
            }),
        Command::Sweep { spec, overrides, out } => sweep(spec, overrides, out),
        Command::Gradcheck { seed } => gradcheck(*seed).map(|_| 0),
        Command::Plot { kind, input, x, y, out } => ensure_dir(out)
            .and_then(|_| plot_file(input, *kind, x.as_deref(), y.as_deref(), out))
            .map(|p| {
                println!("{}", p.display());
                0
            }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
