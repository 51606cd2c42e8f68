use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use atso::datasets::save_bundle;
use atso::orchestrator::{run, run_transfer, write_run_artifacts, RunOutcome};
use atso::reporting::{parse_config, read_bundle, reduced_sweep, sweep, write_report, ExperimentConfig, Layout, RunReportBundle};
use clap::{Parser, Subcommand};

/// Self-training schedules on synthetic segmentation tasks.
#[derive(Parser)]
#[command(name = "atso", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset (and its shifted target, if any).
    Gen {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// One run of the configured mode.
    Run(RunArgs),
    /// One run with labeled source data and an unlabeled shifted target.
    Transfer(RunArgs),
    /// The reduced-class staged protocol over the sweep seeds.
    Reduced(RunArgs),
    /// Every configured mode over the sweep seeds.
    Sweep(RunArgs),
    /// Render a saved result bundle.
    Report {
        #[arg(short, long)]
        bundle: PathBuf,
        /// table1, appendixA, table3, csv or json.
        #[arg(short, long)]
        layout: Layout,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let cfg = parse_config(&self.config)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn finish_run(outcome: &RunOutcome, out: &Path) -> Result<()> {
    write_run_artifacts(outcome, out).with_context(|| format!("writing artifacts to {}", out.display()))?;
    let r = &outcome.report;
    for row in &r.rows {
        println!("{:>6} {} R {:.2} E {:.2}", row.row, r.mode, row.reference * 100.0, row.test * 100.0);
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn summarize(bundle: &RunReportBundle, out: &Path) {
    println!("{} runs, {} reduced protocols; results in {}", bundle.runs.len(), bundle.reduced.len(), out.display());
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let cfg = match config {
                Some(p) => parse_config(p)?,
                None => ExperimentConfig::default(),
            };
            let seed = seed.unwrap_or(cfg.seed);
            if cfg.shift.is_some() {
                let (source, target) = cfg.transfer_pair(seed)?;
                save_bundle(&source, out.join("source"))?;
                save_bundle(&target, out.join("target"))?;
            } else {
                save_bundle(&cfg.dataset(seed)?, &out)?;
            }
            println!("dataset written to {}", out.display());
        }
        Command::Run(args) => {
            let (cfg, out) = args.load()?;
            let outcome = run(&cfg.dataset(cfg.seed)?, &cfg.settings(cfg.mode, cfg.seed))?;
            finish_run(&outcome, &out)?;
        }
        Command::Transfer(args) => {
            let (cfg, out) = args.load()?;
            let (source, target) = cfg.transfer_pair(cfg.seed)?;
            let outcome = run_transfer(&source, &target, &cfg.settings(cfg.mode, cfg.seed))?;
            finish_run(&outcome, &out)?;
        }
        Command::Reduced(args) => {
            let (cfg, out) = args.load()?;
            summarize(&reduced_sweep(&cfg, Some(&out))?, &out);
        }
        Command::Sweep(args) => {
            let (cfg, out) = args.load()?;
            summarize(&sweep(&cfg, Some(&out))?, &out);
        }
        Command::Report { bundle, layout, out } => {
            let bundle = read_bundle(&bundle).with_context(|| format!("reading {}", bundle.display()))?;
            write_report(&bundle, layout, &out)?;
            println!("{} written to {}", layout.name(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<atso::Error>().is_some_and(atso::Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
