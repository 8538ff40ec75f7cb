use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use confloop_cli::commands::{cmd_report, cmd_run, cmd_serve, cmd_synth, Outcome};
use confloop_cli::config::RunConfig;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "confloop", version, about = "Iterative confounder discovery over causal trees")]
struct Cli {
    /// Configuration file: a run config for run/serve, a synth config for synth.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (cohort files for synth, run directories otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Review service address.
    #[arg(long, global = true, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Also write the report table as CSV to this path.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known effects.
    Synth,
    /// Run the confounder loop over a dataset.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to meta.json next to the data file.
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Host the review service for the duration of the run.
        #[arg(long)]
        serve: bool,
    },
    /// Print per-iteration results of a finished or partial run.
    Report { run_dir: PathBuf },
    /// Serve the review API, optionally running the loop alongside it.
    Serve {
        #[arg(long, requires = "config")]
        data: Option<PathBuf>,
        #[arg(long)]
        meta: Option<PathBuf>,
        /// Static review UI assets to serve under `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

async fn dispatch(cli: Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("cohort"));
            cmd_synth(cli.config.as_deref(), cli.seed, &out)
        }
        Command::Run { data, meta, serve } => {
            let cfg = run_config(&cli)?;
            if *serve {
                cmd_serve(cfg, Some((data.clone(), meta.clone())), cli.bind, None, true).await
            } else {
                let (data, meta) = (data.clone(), meta.clone());
                tokio::task::spawn_blocking(move || cmd_run(&cfg, &data, meta.as_deref())).await?
            }
        }
        Command::Report { run_dir } => {
            print!("{}", cmd_report(run_dir, cli.csv.as_deref())?);
            Ok(Outcome::Done)
        }
        Command::Serve { data, meta, ui_dir } => {
            let cfg = run_config(&cli)?;
            let data = data.clone().map(|d| (d, meta.clone()));
            cmd_serve(cfg, data, cli.bind, ui_dir.clone(), false).await
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()).await {
        Ok(outcome) => {
            if let Outcome::Run { dir, termination } = &outcome {
                println!("{}", dir.display());
                if let Some(t) = termination {
                    println!("terminated: {t}");
                }
            }
            if outcome.aborted() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
