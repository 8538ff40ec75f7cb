use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use confloop::dataset::{load_dataset, Dataset};
use confloop::orchestrator::{
    load_report, persist_run, run_pipeline, PipelineEnv, ReportWriter, RunObserver, RunOutput, RunReport, Termination,
};
use confloop::review::ReviewStore;
use confloop::synth::{generate, write_cohort, SynthConfig};
use confloop_server::serve_review_api;
use serde_json::json;
use tracing::{info, warn};

use crate::config::RunConfig;

/// How a finished command should exit.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done,
    Run { dir: PathBuf, termination: Option<Termination> },
}

impl Outcome {
    pub fn aborted(&self) -> bool {
        matches!(self, Outcome::Run { termination: Some(t), .. } if t.is_aborted())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Wall-clock times live here so every other output stays byte-stable.
fn write_timestamps(dir: &Path, command: &str, started_at: u64) -> Result<()> {
    let path = dir.join("timestamps.json");
    let body = json!({ "command": command, "started_at": started_at, "finished_at": unix_now() });
    std::fs::write(&path, format!("{body:#}\n")).with_context(|| format!("writing {}", path.display()))
}

/// Confounded four-covariate cohort used when no synth config is given.
pub fn default_synth_config(seed: u64) -> SynthConfig {
    SynthConfig::one_confounder(5000, 1.5, 2.0, seed)
}

pub fn cmd_synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<Outcome> {
    let started = unix_now();
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SynthConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => default_synth_config(seed.unwrap_or(0)),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let (ds, truth) = generate(&cfg)?;
    write_cohort(out, &ds, &truth)?;
    write_timestamps(out, "synth", started)?;
    info!(n = ds.len(), ate = truth.ate, dir = %out.display(), "cohort written");
    Ok(Outcome::Done)
}

fn load_inputs(data: &Path, meta: Option<&Path>) -> Result<Dataset> {
    let meta = meta.map(Path::to_path_buf).unwrap_or_else(|| data.with_file_name("meta.json"));
    load_dataset(data, &meta).with_context(|| format!("loading {} with {}", data.display(), meta.display()))
}

fn execute(cfg: &RunConfig, ds: &Dataset, store: Option<&ReviewStore>) -> Result<(PathBuf, RunOutput)> {
    let policy = cfg.build_policy(store)?;
    let backend = cfg.build_backend().context("agent backend")?;
    let kb = cfg.build_knowledge().context("knowledge base")?;
    let writer = ReportWriter { out: cfg.out_dir.clone() };
    let mut observers: Vec<&dyn RunObserver> = vec![&writer];
    if let Some(store) = store {
        observers.push(store);
    }
    let env = PipelineEnv { backend: backend.as_ref(), policy: policy.as_ref(), kb: &kb, observers };
    let output = run_pipeline(ds, &cfg.pipeline(), &env).context("pipeline")?;
    let dir = persist_run(&cfg.out_dir, &output).context("persisting run")?;
    Ok((dir, output))
}

fn finished(dir: PathBuf, report: &RunReport) -> Outcome {
    match &report.termination {
        Some(t) => info!(run_id = %report.run_id, termination = %t, dir = %dir.display(), "run finished"),
        None => warn!(run_id = %report.run_id, "run ended without a termination reason"),
    }
    Outcome::Run { dir, termination: report.termination.clone() }
}

pub fn cmd_run(cfg: &RunConfig, data: &Path, meta: Option<&Path>) -> Result<Outcome> {
    if cfg.is_interactive() {
        bail!("interactive policy requires review service (use `confloop serve` or `run --serve`)");
    }
    let started = unix_now();
    let ds = load_inputs(data, meta)?;
    let (dir, output) = execute(cfg, &ds, None)?;
    write_timestamps(&dir, "run", started)?;
    Ok(finished(dir, &output.report))
}

/// Serves the review API and, when `data` is given, runs the pipeline next to it.
///
/// With `exit_when_done` the service stops once the run ends; otherwise it
/// keeps serving until SIGTERM or Ctrl-C. A signal aborts any run blocked at
/// a review gate and persists what it completed.
pub async fn cmd_serve(
    cfg: RunConfig,
    data: Option<(PathBuf, Option<PathBuf>)>,
    bind: SocketAddr,
    ui_dir: Option<PathBuf>,
    exit_when_done: bool,
) -> Result<Outcome> {
    let store = ReviewStore::new();
    // Register before announcing the address so an early SIGTERM is not fatal.
    let shutdown = shutdown_signal()?;
    tokio::pin!(shutdown);
    let handle = serve_review_api(store.clone(), bind, ui_dir).await.with_context(|| format!("binding {bind}"))?;
    println!("review API listening on http://{}", handle.addr);

    let mut run = match data {
        Some((data, meta)) => {
            let ds = load_inputs(&data, meta.as_deref())?;
            // Surface configuration errors before anything is served for the run.
            cfg.build_policy(Some(&store))?;
            let store = store.clone();
            Some(tokio::task::spawn_blocking(move || {
                let started = unix_now();
                let (dir, output) = execute(&cfg, &ds, Some(&store))?;
                write_timestamps(&dir, "serve", started)?;
                Ok::<_, anyhow::Error>(finished(dir, &output.report))
            }))
        }
        None => None,
    };

    let mut outcome = Outcome::Done;
    let mut signalled = false;
    loop {
        tokio::select! {
            joined = async { run.as_mut().expect("guarded").await }, if run.is_some() => {
                run = None;
                outcome = joined.context("pipeline task")??;
                if exit_when_done || signalled {
                    break;
                }
            }
            _ = &mut shutdown, if !signalled => {
                info!("shutting down");
                signalled = true;
                store.abort_all();
                if run.is_none() {
                    break;
                }
            }
        }
    }
    handle.shutdown().await.context("stopping review API")?;
    Ok(outcome)
}

#[cfg(unix)]
fn shutdown_signal() -> Result<impl std::future::Future<Output = ()>> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).context("installing SIGTERM handler")?;
    Ok(async move {
        tokio::select! {
            _ = term.recv() => {}
            _ = tokio::signal::ctrl_c() => {}
        }
    })
}

#[cfg(not(unix))]
fn shutdown_signal() -> Result<impl std::future::Future<Output = ()>> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
    })
}

/// One row per iteration: index, validated confounders, mean CI width, stable and unstable counts.
pub fn report_rows(report: &RunReport) -> Vec<[String; 5]> {
    report
        .iterations
        .iter()
        .map(|it| {
            [
                it.index.to_string(),
                it.validated.join("+"),
                format!("{:.4}", it.mean_ci_width),
                it.stable.to_string(),
                it.unstable.to_string(),
            ]
        })
        .collect()
}

const HEADER: [&str; 5] = ["iteration", "validated", "mean_ci_width", "stable", "unstable"];

pub fn render_table(report: &RunReport) -> String {
    let rows = report_rows(report);
    let mut widths = HEADER.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len().max(1));
        }
    }
    let mut out = String::new();
    let line = |cells: [&str; 5], out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(HEADER, &mut out);
    for row in &rows {
        let validated = if row[1].is_empty() { "-" } else { row[1].as_str() };
        line([&row[0], validated, &row[2], &row[3], &row[4]], &mut out);
    }
    let _ = writeln!(out, "run {}", report.run_id);
    if let (Some(base), Some(fin)) = (report.baseline_ate, report.final_ate) {
        let _ = writeln!(out, "baseline ATE {base:.4}, final ATE {fin:.4}");
    }
    match &report.termination {
        Some(t) => {
            let _ = writeln!(out, "terminated: {t}");
        }
        None => {
            let _ = writeln!(out, "in progress");
        }
    }
    out
}

pub fn write_report_csv(report: &RunReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(HEADER)?;
    for row in report_rows(report) {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_report(run_dir: &Path, csv: Option<&Path>) -> Result<String> {
    if !run_dir.join("report.json").is_file() {
        bail!("{} has no report.json", run_dir.display());
    }
    let report = load_report(run_dir).with_context(|| format!("reading report in {}", run_dir.display()))?;
    if let Some(path) = csv {
        write_report_csv(&report, path)?;
    }
    Ok(render_table(&report))
}
