use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use stochseq_cli::commands::{cmd_eval, cmd_sample, cmd_synth, SampleRequest};
use stochseq_cli::config::RunConfig;
use stochseq_cli::report::cmd_report;
use stochseq_cli::train::cmd_train;

#[derive(Parser)]
#[command(name = "stochseq", version, about = "Stochastic sequence prediction experiments")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// concat, addproj, mnm or lcp.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// ours, ce, ece, lgl or sigmoid.
    #[arg(long, global = true)]
    loss: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Samples per condition.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Output directory (run, dataset, samples or report, per command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic motion dataset.
    Synth,
    /// Train a model into a new run directory.
    Train,
    /// Draw samples from a checkpoint for the test conditions.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Emit one deterministic sequence per condition.
        #[arg(long)]
        mode: bool,
        /// Dataset to condition on instead of the checkpoint's own.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use at most this many conditions.
        #[arg(long)]
        conditions: Option<usize>,
    },
    /// Evaluate a run and append the metrics to its log.
    Eval {
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Plot and tabulate several runs.
    Report {
        runs: Vec<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let flags = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("scheme", cli.scheme.clone()),
        ("loss", cli.loss.clone()),
        ("alpha", cli.alpha.map(|v| v.to_string())),
        ("k", cli.k.map(|v| v.to_string())),
        ("out", cli.out.as_ref().map(|p| p.display().to_string())),
    ];
    pairs.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
    Ok(base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth => {
            let cfg = config(&cli)?;
            let out = match (&cli.out, cfg.resolved_data_dir()) {
                (Some(o), _) => o.clone(),
                (None, Some(d)) => d,
                (None, None) => bail!("synth needs --out or STOCHSEQ_DATA_DIR"),
            };
            let hash = cmd_synth(&cfg, &out)?;
            println!("{hash}  {}", out.display());
        }
        Command::Train => {
            let cfg = config(&cli)?;
            let summary = cmd_train(&cfg)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Sample {
            checkpoint,
            mode,
            data,
            conditions,
        } => {
            let out = cli.out.clone().context("sample needs --out")?;
            let n = cmd_sample(&SampleRequest {
                checkpoint: checkpoint.clone(),
                out: out.clone(),
                k: cli.k.unwrap_or(RunConfig::default().k),
                mode: *mode,
                seed: cli.seed.unwrap_or(0),
                data_dir: data.clone(),
                conditions: *conditions,
            })?;
            println!("wrote {n} sequences under {}", out.display());
        }
        Command::Eval { run, checkpoint } => {
            let row = cmd_eval(run, checkpoint.as_deref(), cli.k)?;
            println!("{}", serde_json::to_string(&row)?);
        }
        Command::Report { runs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report"));
            let rep = cmd_report(runs, &out)?;
            print!("{}", rep.table_text);
            for p in rep.plots {
                println!("plot {}", p.display());
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
