//! The iterative loop: baseline tree and intervals, then agent proposals,
//! expert review, restriction, per-stratum refits and stability filtering
//! until no new confounder is accepted. Produces the run report and the
//! mixture-of-trees model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::agent::{self, AgentBackend, AgentConfig, AgentContext, AgentEnv, AgentTrace};
use crate::bootstrap_ci::{
    bag, fit_ensemble, predict_ci, stability_filter, BootstrapConfig, BootstrapError, CIRecord, StabilityReport,
};
use crate::causal_tree::{fit_tree, Partition, SplitRule, Tree, TreeError, TreeParams};
use crate::dataset::{
    apply_restriction, remaining_covariates, split_dataset, CovariateMap, CovariateMeta, Dataset, DatasetError,
    RestrictionContext, RowId, StratumKey, DEFAULT_MIN_STRATUM_SIZE, DEFAULT_SPLIT_RATIOS,
};
use crate::knowledge::{GatherConfig, KnowledgeBase};
use crate::review::{request_decision, ExpertPolicy, ReviewItem, ReviewOutcome, ReviewStore, RunStatus};
use crate::rng::{stream, sub_seed};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("baseline iteration failed: {0}")]
    Baseline(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub split_ratios: [f64; 3],
    pub tree: TreeParams,
    pub bootstrap: BootstrapConfig,
    pub agent: AgentConfig,
    pub gather: GatherConfig,
    pub max_iterations: usize,
    pub min_active_samples: usize,
    pub max_rework: usize,
    pub min_stratum_size: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            split_ratios: DEFAULT_SPLIT_RATIOS,
            tree: TreeParams::default(),
            bootstrap: BootstrapConfig::default(),
            agent: AgentConfig::default(),
            gather: GatherConfig::default(),
            max_iterations: 5,
            min_active_samples: 100,
            max_rework: 2,
            min_stratum_size: DEFAULT_MIN_STRATUM_SIZE,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.tree.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.agent.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.bootstrap.b == 0 {
            return bad("bootstrap.b must be at least 1".into());
        }
        if !(self.bootstrap.alpha > 0.0 && self.bootstrap.alpha < 1.0) {
            return bad(format!("bootstrap.alpha must lie in (0, 1), got {}", self.bootstrap.alpha));
        }
        if self.gather.k_keep == 0 || self.gather.k_retrieve == 0 {
            return bad("gather.k_retrieve and gather.k_keep must be at least 1".into());
        }
        if self.min_stratum_size == 0 {
            return bad("min_stratum_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Why the loop stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    /// The agent found nothing new.
    EmptyConfounderSet { iteration: usize },
    /// Every proposal was rejected in every allowed rework round.
    ReworkExhausted { iteration: usize, attempts: usize },
    MaxIterations { max_iterations: usize },
    TooFewActive { active: usize, required: usize },
    PoolExhausted { iteration: usize },
    /// Restriction left no stratum large enough to fit.
    NoViableStrata { iteration: usize },
    Aborted { iteration: usize, stage: String, message: String },
}

impl Termination {
    pub fn is_aborted(&self) -> bool {
        matches!(self, Termination::Aborted { .. })
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::EmptyConfounderSet { iteration } => write!(f, "empty C′ at iteration {iteration}"),
            Termination::ReworkExhausted { iteration, attempts } => {
                write!(f, "all proposals rejected at iteration {iteration} after {attempts} attempts")
            }
            Termination::MaxIterations { max_iterations } => write!(f, "reached max_iterations = {max_iterations}"),
            Termination::TooFewActive { active, required } => {
                write!(f, "{active} active samples, fewer than {required}")
            }
            Termination::PoolExhausted { iteration } => write!(f, "covariate pool exhausted at iteration {iteration}"),
            Termination::NoViableStrata { iteration } => write!(f, "no viable stratum at iteration {iteration}"),
            Termination::Aborted { iteration, stage, message } => {
                write!(f, "aborted at iteration {iteration} in {stage}: {message}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub key: String,
    pub context: RestrictionContext,
    pub n_train: usize,
    pub n_estimation: usize,
    pub n_test: usize,
    pub tree_id: String,
    pub n_leaves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedStratum {
    pub key: String,
    pub reason: String,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: usize,
    pub new_confounders: Vec<String>,
    pub validated: Vec<String>,
    pub covariate_pool: Vec<String>,
    pub agent_attempts: usize,
    pub strata: Vec<StratumSummary>,
    pub dropped_strata: Vec<DroppedStratum>,
    pub active_train: usize,
    pub active_estimation: usize,
    pub active_test: usize,
    pub mean_ci_width: f64,
    pub threshold: f64,
    pub stable: usize,
    pub unstable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAssignment {
    pub sample_id: String,
    pub cate: f64,
    pub iteration: usize,
    pub leaf_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub covariates: Vec<String>,
    pub fingerprint: String,
    pub n_train: usize,
    pub n_estimation: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config: PipelineConfig,
    pub prompt_hashes: BTreeMap<String, String>,
    pub backend: String,
    pub policy: String,
    pub dataset: DatasetSummary,
    pub iterations: Vec<IterationSummary>,
    /// In order of acceptance.
    pub validated: Vec<String>,
    pub reviews: Vec<ReviewOutcome>,
    pub final_assignments: Vec<FinalAssignment>,
    /// Mean baseline-tree CATE over the test split.
    pub baseline_ate: Option<f64>,
    /// Mean backward-trace CATE over the test split.
    pub final_ate: Option<f64>,
    pub termination: Option<Termination>,
}

impl RunReport {
    pub fn widths(&self) -> Vec<f64> {
        self.iterations.iter().map(|i| i.mean_ci_width).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStratum {
    pub context: RestrictionContext,
    pub tree: Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIteration {
    pub index: usize,
    pub validated: Vec<String>,
    pub strata: Vec<ModelStratum>,
    pub stable_ids: Vec<String>,
}

/// Per-iteration trees with the restriction each was fitted under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalModel {
    pub meta: Vec<CovariateMeta>,
    pub iterations: Vec<ModelIteration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub cate: f64,
    pub iteration: usize,
    pub leaf_id: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("model has no baseline iteration")]
    NoBaseline,
    #[error("missing value for covariate {0}")]
    MissingCovariate(String),
}

/// Scans iterations from last to first and answers from the first stratum that
/// admits `x`; the unrestricted baseline always matches.
pub fn predict_final(model: &FinalModel, x: &CovariateMap) -> Result<Prediction, PredictError> {
    let baseline = model.iterations.first().filter(|i| i.index == 0 && !i.strata.is_empty()).ok_or(PredictError::NoBaseline)?;
    for iteration in model.iterations.iter().rev() {
        for stratum in &iteration.strata {
            let admitted = stratum.context.admits(&model.meta, x).ok_or_else(|| {
                let missing = stratum.context.stratum.keys().find(|k| !x.contains_key(*k)).cloned().unwrap_or_default();
                PredictError::MissingCovariate(missing)
            })?;
            if !admitted {
                continue;
            }
            return match stratum.tree.assign_leaf(x) {
                Ok(leaf) => Ok(Prediction { cate: leaf.cate, iteration: iteration.index, leaf_id: leaf.id }),
                Err(TreeError::MissingCovariate(name)) => Err(PredictError::MissingCovariate(name)),
                Err(_) => continue,
            };
        }
    }
    // Unreachable in practice: the baseline stratum is unrestricted.
    let leaf = baseline.strata[0].tree.assign_leaf(x).map_err(|e| PredictError::MissingCovariate(e.to_string()))?;
    Ok(Prediction { cate: leaf.cate, iteration: 0, leaf_id: leaf.id })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecords {
    pub index: usize,
    pub threshold: f64,
    pub records: Vec<CIRecord>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub model: FinalModel,
    pub traces: Vec<AgentTrace>,
    pub ci: Vec<IterationRecords>,
}

/// Progress hooks; the review store and run-directory writer implement them.
pub trait RunObserver: Send + Sync {
    fn run_started(&self, _report: &RunReport) {}
    fn report_updated(&self, _report: &RunReport) {}
    fn trace_recorded(&self, _run_id: &str, _trace: &AgentTrace) {}
    fn review_decided(&self, _item: &ReviewItem) {}
    fn run_finished(&self, _report: &RunReport) {}
}

impl RunObserver for ReviewStore {
    fn run_started(&self, report: &RunReport) {
        self.register_run(&report.run_id);
        self.report_updated(report);
    }

    fn report_updated(&self, report: &RunReport) {
        if let Ok(v) = serde_json::to_value(report) {
            self.set_report(&report.run_id, v);
        }
    }

    fn trace_recorded(&self, run_id: &str, trace: &AgentTrace) {
        if let Ok(v) = serde_json::to_value(trace) {
            self.push_trace(run_id, trace.iteration, v);
        }
    }

    fn review_decided(&self, item: &ReviewItem) {
        self.open_item(item.clone());
    }

    fn run_finished(&self, report: &RunReport) {
        self.report_updated(report);
        let status = match &report.termination {
            Some(t) if t.is_aborted() => RunStatus::Aborted,
            _ => RunStatus::Completed,
        };
        self.set_status(&report.run_id, status);
    }
}

/// Collaborators of a run.
pub struct PipelineEnv<'a> {
    pub backend: &'a dyn AgentBackend,
    pub policy: &'a dyn ExpertPolicy,
    pub kb: &'a KnowledgeBase,
    pub observers: Vec<&'a dyn RunObserver>,
}

/// SHA-256 over ids, treatments, outcomes and covariate bits.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for m in ds.meta() {
        hasher.update(m.name.as_bytes());
        hasher.update([0]);
    }
    for s in ds.samples() {
        hasher.update(s.id.as_bytes());
        hasher.update([0, s.treatment]);
        hasher.update(s.outcome.to_bits().to_le_bytes());
        for v in &s.covariates {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

pub fn run_id_for(config: &PipelineConfig, fingerprint: &str, backend: &str, policy: &str) -> String {
    let config = serde_json::to_string(config).unwrap_or_default();
    let digest = Sha256::digest(format!("{config}\n{fingerprint}\n{backend}\n{policy}").as_bytes());
    format!("run-{}", &hex::encode(digest)[..12])
}

struct StratumFit {
    key: StratumKey,
    context: RestrictionContext,
    tree: Tree,
    records: Vec<CIRecord>,
    n_train: usize,
    n_est: usize,
    n_test: usize,
}

enum StratumResult {
    Fitted(StratumFit),
    Dropped(DroppedStratum),
}

fn arm_counts(ds: &Dataset, rows: &[RowId]) -> (usize, usize) {
    let treated = rows.iter().filter(|&&r| ds.sample(r).is_treated()).count();
    (treated, rows.len() - treated)
}

/// Tree on the train rows, bagged ensemble on the estimation rows, intervals on the test rows.
#[allow(clippy::too_many_arguments)]
fn fit_stratum(
    ds: &Dataset,
    key: StratumKey,
    context: RestrictionContext,
    train: &[RowId],
    est: &[RowId],
    test: &[RowId],
    covariates: &[String],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<StratumResult, String> {
    let required = 2 * cfg.tree.min_leaf_per_arm;
    for (name, rows) in [("train", train), ("estimation", est)] {
        let (t, c) = arm_counts(ds, rows);
        if t < required || c < required {
            return Ok(StratumResult::Dropped(DroppedStratum {
                key: key.to_string(),
                reason: format!("{name} arms {t}/{c} below {required}"),
                n_test: test.len(),
            }));
        }
    }
    let tree = fit_tree(ds, train, covariates, &cfg.tree.with_seed(seed)).map_err(|e| format!("tree fit: {e}"))?;
    let bags = bag(est, cfg.bootstrap.b, sub_seed(seed, stream::BAGS));
    let params = cfg.tree.with_seed(sub_seed(seed, stream::ENSEMBLE));
    let ensemble = match fit_ensemble(ds, est, &bags, covariates, &params) {
        Ok(e) => e,
        Err(e @ BootstrapError::Unfittable { .. }) => {
            return Ok(StratumResult::Dropped(DroppedStratum { key: key.to_string(), reason: e.to_string(), n_test: test.len() }))
        }
        Err(e) => return Err(format!("ensemble fit: {e}")),
    };
    let records = predict_ci(&ensemble, ds, test, cfg.bootstrap.alpha).map_err(|e| format!("interval prediction: {e}"))?;
    Ok(StratumResult::Fitted(StratumFit {
        key,
        context,
        tree,
        records,
        n_train: train.len(),
        n_est: est.len(),
        n_test: test.len(),
    }))
}

fn iteration_seed(seed: u64, index: usize) -> u64 {
    sub_seed(sub_seed(seed, stream::TREE), index as u64)
}

fn stratum_prefix(ds: &Dataset, context: &RestrictionContext) -> Vec<SplitRule> {
    context
        .confounders
        .iter()
        .filter_map(|name| {
            let meta = ds.covariate(name)?;
            let code = meta.level_code(context.stratum.get(name)?)?;
            Some(SplitRule::equals(meta, code))
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

struct Run<'a, 'b> {
    ds: &'a Dataset,
    cfg: &'a PipelineConfig,
    env: &'a PipelineEnv<'b>,
    report: RunReport,
    model: FinalModel,
    traces: Vec<AgentTrace>,
    ci: Vec<IterationRecords>,
}

impl Run<'_, '_> {
    fn publish(&self) {
        for o in &self.env.observers {
            o.report_updated(&self.report);
        }
    }

    fn record_iteration(
        &mut self,
        summary: IterationSummary,
        strata: Vec<ModelStratum>,
        stability: &StabilityReport,
    ) {
        self.model.iterations.push(ModelIteration {
            index: summary.index,
            validated: summary.validated.clone(),
            strata,
            stable_ids: stability.stable_ids.clone(),
        });
        self.ci.push(IterationRecords {
            index: summary.index,
            threshold: stability.threshold,
            records: stability.records.clone(),
        });
        info!(
            iteration = summary.index,
            mean_ci_width = summary.mean_ci_width,
            stable = summary.stable,
            unstable = summary.unstable,
            "iteration complete"
        );
        self.report.iterations.push(summary);
        self.publish();
    }

    fn finish(mut self, termination: Termination) -> RunOutput {
        info!(run_id = %self.report.run_id, %termination, "run finished");
        let test = split_dataset(self.ds, self.cfg.split_ratios, self.cfg.seed).map(|s| s.test).unwrap_or_default();
        if !self.model.iterations.is_empty() {
            let baseline = &self.model.iterations[0].strata[0].tree;
            self.report.baseline_ate = mean(test.iter().filter_map(|&r| baseline.leaf_for_row(self.ds, r).ok().map(|l| l.cate)));
            self.report.final_assignments = test
                .iter()
                .filter_map(|&r| {
                    let p = predict_final(&self.model, &self.ds.covariate_map(r)).ok()?;
                    Some(FinalAssignment { sample_id: self.ds.sample(r).id.clone(), cate: p.cate, iteration: p.iteration, leaf_id: p.leaf_id })
                })
                .collect();
            self.report.final_ate = mean(self.report.final_assignments.iter().map(|a| a.cate));
        }
        self.report.termination = Some(termination);
        for o in &self.env.observers {
            o.run_finished(&self.report);
        }
        RunOutput { report: self.report, model: self.model, traces: self.traces, ci: self.ci }
    }
}

/// Runs the full loop. Baseline failures are errors; later failures end the
/// run with an `Aborted` termination and whatever was completed so far.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig, env: &PipelineEnv<'_>) -> Result<RunOutput, PipelineError> {
    cfg.validate()?;
    let split = split_dataset(ds, cfg.split_ratios, cfg.seed).map_err(|e| PipelineError::Baseline(e.to_string()))?;
    let fingerprint = dataset_fingerprint(ds);
    let backend = env.backend.name();
    let policy = env.policy.name();
    let run_id = run_id_for(cfg, &fingerprint, &backend, &policy);
    let (n_train, n_estimation, n_test) = split.sizes();
    let report = RunReport {
        run_id: run_id.clone(),
        config: cfg.clone(),
        prompt_hashes: agent::prompts::template_hashes(),
        backend,
        policy,
        dataset: DatasetSummary { n: ds.len(), covariates: ds.covariate_names(), fingerprint, n_train, n_estimation, n_test },
        iterations: Vec::new(),
        validated: Vec::new(),
        reviews: Vec::new(),
        final_assignments: Vec::new(),
        baseline_ate: None,
        final_ate: None,
        termination: None,
    };
    for o in &env.observers {
        o.run_started(&report);
    }
    let mut run = Run {
        ds,
        cfg,
        env,
        report,
        model: FinalModel { meta: ds.meta().to_vec(), iterations: Vec::new() },
        traces: Vec::new(),
        ci: Vec::new(),
    };

    // Baseline: unrestricted, full covariate pool.
    let pool = ds.covariate_names();
    let baseline = fit_stratum(
        ds,
        StratumKey(Vec::new()),
        RestrictionContext::default(),
        &split.train,
        &split.estimation,
        &split.test,
        &pool,
        cfg,
        iteration_seed(cfg.seed, 0),
    );
    let fit = match baseline {
        Ok(StratumResult::Fitted(fit)) => fit,
        Ok(StratumResult::Dropped(d)) => return Err(PipelineError::Baseline(d.reason)),
        Err(e) => return Err(PipelineError::Baseline(e)),
    };
    let stability = stability_filter(fit.records.clone()).map_err(|e| PipelineError::Baseline(e.to_string()))?;
    let mut partition = fit.tree.partition();
    let summary = IterationSummary {
        index: 0,
        new_confounders: Vec::new(),
        validated: Vec::new(),
        covariate_pool: pool.clone(),
        agent_attempts: 0,
        strata: vec![StratumSummary {
            key: fit.key.to_string(),
            context: fit.context.clone(),
            n_train: fit.n_train,
            n_estimation: fit.n_est,
            n_test: fit.n_test,
            tree_id: fit.tree.tree_id.clone(),
            n_leaves: fit.tree.n_leaves(),
        }],
        dropped_strata: Vec::new(),
        active_train: split.train.len(),
        active_estimation: split.estimation.len(),
        active_test: split.test.len(),
        mean_ci_width: stability.mean_width,
        threshold: stability.threshold,
        stable: stability.stable_ids.len(),
        unstable: stability.unstable_ids.len(),
    };
    let mut active_test = stability.unstable_rows();
    run.record_iteration(summary, vec![ModelStratum { context: fit.context, tree: fit.tree }], &stability);

    let mut validated: Vec<String> = Vec::new();
    let mut index = 1;
    let termination = loop {
        let validated_set: BTreeSet<String> = validated.iter().cloned().collect();
        if index > cfg.max_iterations {
            break Termination::MaxIterations { max_iterations: cfg.max_iterations };
        }
        let pool = match remaining_covariates(ds, &validated_set) {
            Ok(p) => p,
            Err(e) => break abort(index, "restriction", e),
        };
        if pool.is_empty() {
            break Termination::PoolExhausted { iteration: index };
        }
        if active_test.len() < cfg.min_active_samples {
            break Termination::TooFewActive { active: active_test.len(), required: cfg.min_active_samples };
        }

        // Agent proposals through the expert gate, with bounded rework.
        let mut ctx = AgentContext { iteration: index, attempt: 0, validated: validated_set.clone(), ..Default::default() };
        let agent_env = AgentEnv { backend: env.backend, kb: env.kb, gather: &cfg.gather, meta: ds.meta(), config: &cfg.agent };
        let gate: Result<Option<Vec<String>>, Termination> = loop {
            let (set, trace) = match agent::run_agent_iteration(&partition, &agent_env, &ctx) {
                Ok(out) => out,
                Err(e) => break Err(abort(index, "agent", e)),
            };
            for o in &env.observers {
                o.trace_recorded(&run.report.run_id, &trace);
            }
            run.traces.push(trace);
            if set.is_empty() {
                break Ok(None);
            }
            let item = match request_decision(&set, env.policy, &run.report.run_id, index, ctx.attempt) {
                Ok(item) => item,
                Err(e) => break Err(abort(index, "review", e)),
            };
            for o in &env.observers {
                o.review_decided(&item);
            }
            let outcome = item.outcome();
            run.report.reviews.push(outcome.clone());
            run.publish();
            if !outcome.accepted.is_empty() {
                break Ok(Some(outcome.accepted));
            }
            if ctx.attempt >= cfg.max_rework {
                break Err(Termination::ReworkExhausted { iteration: index, attempts: ctx.attempt + 1 });
            }
            ctx.rejected.extend(outcome.rejected);
            ctx.feedback = outcome.feedback;
            ctx.attempt += 1;
        };
        let accepted = match gate {
            Ok(Some(names)) => names,
            Ok(None) => break Termination::EmptyConfounderSet { iteration: index },
            Err(t) => break t,
        };
        let attempts = ctx.attempt + 1;
        validated.extend(accepted.iter().cloned());
        run.report.validated = validated.clone();
        let validated_set: BTreeSet<String> = validated.iter().cloned().collect();
        let pool = match remaining_covariates(ds, &validated_set) {
            Ok(p) if !p.is_empty() => p,
            Ok(_) => {
                // Nothing left to split on; the accepted names still count as validated.
                run.publish();
                break Termination::PoolExhausted { iteration: index };
            }
            Err(e) => break abort(index, "restriction", e),
        };

        match restricted_iteration(&mut run, index, &validated, &accepted, &pool, &split.train, &split.estimation, &active_test, attempts)
        {
            Ok(Some((next_partition, next_active))) => {
                partition = next_partition;
                active_test = next_active;
            }
            Ok(None) => break Termination::NoViableStrata { iteration: index },
            Err(t) => break t,
        }
        index += 1;
    };
    Ok(run.finish(termination))
}

fn abort(iteration: usize, stage: &str, e: impl fmt::Display) -> Termination {
    warn!(iteration, stage, error = %e, "run aborted");
    Termination::Aborted { iteration, stage: stage.to_string(), message: e.to_string() }
}

/// Restricts on the validated confounders, refits every viable stratum and
/// filters the pooled intervals. Returns the combined partition and the
/// unstable test rows, or `None` when no stratum could be fitted.
#[allow(clippy::too_many_arguments)]
fn restricted_iteration(
    run: &mut Run<'_, '_>,
    index: usize,
    validated: &[String],
    accepted: &[String],
    pool: &[String],
    train: &[RowId],
    est: &[RowId],
    active_test: &[RowId],
    attempts: usize,
) -> Result<Option<(Partition, Vec<RowId>)>, Termination> {
    let ds = run.ds;
    let cfg = run.cfg;
    let context = RestrictionContext::new(validated.to_vec());
    let restrict = |rows: &[RowId], min: usize| -> Result<BTreeMap<StratumKey, Vec<RowId>>, DatasetError> {
        apply_restriction(rows, &context, ds, min)
    };
    let (train_strata, est_strata, test_strata) =
        match (restrict(train, cfg.min_stratum_size), restrict(est, cfg.min_stratum_size), restrict(active_test, 1)) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => return Err(abort(index, "restriction", e)),
        };
    let mut dropped = Vec::new();
    let mut jobs = Vec::new();
    for (s, (key, test_rows)) in test_strata.iter().enumerate() {
        match (train_strata.get(key), est_strata.get(key)) {
            (Some(tr), Some(es)) => jobs.push((s, key.clone(), tr, es, test_rows)),
            _ => dropped.push(DroppedStratum {
                key: key.to_string(),
                reason: format!("fewer than {} train or estimation samples", cfg.min_stratum_size),
                n_test: test_rows.len(),
            }),
        }
    }
    let seed = iteration_seed(cfg.seed, index);
    let results: Vec<Result<StratumResult, String>> = jobs
        .par_iter()
        .map(|(s, key, tr, es, te)| {
            fit_stratum(ds, key.clone(), context.bind(key), tr, es, te, pool, cfg, sub_seed(seed, *s as u64))
        })
        .collect();
    let mut fits = Vec::new();
    for result in results {
        match result {
            Ok(StratumResult::Fitted(fit)) => fits.push(fit),
            Ok(StratumResult::Dropped(d)) => dropped.push(d),
            Err(e) => return Err(abort(index, "stratum fit", e)),
        }
    }
    dropped.sort_by(|a, b| a.key.cmp(&b.key));
    for d in &dropped {
        warn!(iteration = index, stratum = %d.key, n_test = d.n_test, reason = %d.reason, "stratum dropped");
    }
    let records: Vec<CIRecord> = fits.iter().flat_map(|f| f.records.iter().cloned()).collect();
    if records.is_empty() {
        return Ok(None);
    }
    let stability = stability_filter(records).map_err(|e| abort(index, "stability filter", e))?;
    let partition = Partition::combine(
        &format!("iteration-{index}"),
        fits.iter().map(|f| (stratum_prefix(ds, &f.context), f.tree.partition())).collect(),
    );
    let summary = IterationSummary {
        index,
        new_confounders: accepted.to_vec(),
        validated: validated.to_vec(),
        covariate_pool: pool.to_vec(),
        agent_attempts: attempts,
        strata: fits
            .iter()
            .map(|f| StratumSummary {
                key: f.key.to_string(),
                context: f.context.clone(),
                n_train: f.n_train,
                n_estimation: f.n_est,
                n_test: f.n_test,
                tree_id: f.tree.tree_id.clone(),
                n_leaves: f.tree.n_leaves(),
            })
            .collect(),
        dropped_strata: dropped,
        active_train: train_strata.values().map(Vec::len).sum(),
        active_estimation: est_strata.values().map(Vec::len).sum(),
        active_test: active_test.len(),
        mean_ci_width: stability.mean_width,
        threshold: stability.threshold,
        stable: stability.stable_ids.len(),
        unstable: stability.unstable_ids.len(),
    };
    let next_active = stability.unstable_rows();
    let strata = fits.into_iter().map(|f| ModelStratum { context: f.context, tree: f.tree }).collect();
    run.record_iteration(summary, strata, &stability);
    Ok(Some((partition, next_active)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| PipelineError::Io(path.display().to_string(), e))
}

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path).map_err(|e| PipelineError::Io(path.display().to_string(), e))
}

/// Writes `report.json`, `model.json`, `traces/` and `ci/` under `out/<run_id>/`.
pub fn persist_run(out: &Path, output: &RunOutput) -> Result<PathBuf, PipelineError> {
    let dir = out.join(&output.report.run_id);
    create_dir(&dir.join("traces"))?;
    create_dir(&dir.join("ci"))?;
    write_json(&dir.join("report.json"), &output.report)?;
    write_json(&dir.join("model.json"), &output.model)?;
    for trace in &output.traces {
        write_json(&dir.join("traces").join(format!("iteration-{}-attempt-{}.json", trace.iteration, trace.attempt)), trace)?;
    }
    for records in &output.ci {
        write_json(&dir.join("ci").join(format!("iteration-{}.json", records.index)), records)?;
    }
    Ok(dir)
}

/// Keeps `report.json` current while a run is in progress.
pub struct ReportWriter {
    pub out: PathBuf,
}

impl ReportWriter {
    fn write(&self, report: &RunReport) {
        let dir = self.out.join(&report.run_id);
        if let Err(e) = create_dir(&dir).and_then(|()| write_json(&dir.join("report.json"), report)) {
            warn!(error = %e, "could not persist partial report");
        }
    }
}

impl RunObserver for ReportWriter {
    fn run_started(&self, report: &RunReport) {
        self.write(report);
    }

    fn report_updated(&self, report: &RunReport) {
        self.write(report);
    }

    fn run_finished(&self, report: &RunReport) {
        self.write(report);
    }
}

pub fn load_report(run_dir: &Path) -> Result<RunReport, PipelineError> {
    let path = run_dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_model(run_dir: &Path) -> Result<FinalModel, PipelineError> {
    let path = run_dir.join("model.json");
    let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal_tree::{Leaf, Node};

    fn meta() -> Vec<CovariateMeta> {
        vec![CovariateMeta::binary("A", "a flag"), CovariateMeta::binary("B", "b flag")]
    }

    fn stump(cate: f64, seed: u64) -> Tree {
        Tree {
            tree_id: format!("tree-{seed}"),
            covariates: vec!["A".into(), "B".into()],
            fit_params: TreeParams::default(),
            root: Node::Leaf(Leaf { id: 0, path: vec![], cate, n_treated: 20, n_control: 20 }),
        }
    }

    fn bound(names: &[&str], levels: &[&str]) -> RestrictionContext {
        RestrictionContext::new(names.iter().map(|s| s.to_string()).collect())
            .bind(&StratumKey(levels.iter().map(|s| s.to_string()).collect()))
    }

    fn model() -> FinalModel {
        FinalModel {
            meta: meta(),
            iterations: vec![
                ModelIteration { index: 0, validated: vec![], strata: vec![ModelStratum { context: RestrictionContext::default(), tree: stump(0.0, 0) }], stable_ids: vec![] },
                ModelIteration {
                    index: 1,
                    validated: vec!["A".into()],
                    strata: vec![
                        ModelStratum { context: bound(&["A"], &["0"]), tree: stump(1.0, 1) },
                        ModelStratum { context: bound(&["A"], &["1"]), tree: stump(1.5, 2) },
                    ],
                    stable_ids: vec![],
                },
                ModelIteration {
                    index: 2,
                    validated: vec!["A".into(), "B".into()],
                    strata: vec![ModelStratum { context: bound(&["A", "B"], &["1", "1"]), tree: stump(2.0, 3) }],
                    stable_ids: vec![],
                },
            ],
        }
    }

    fn x(a: f64, b: f64) -> CovariateMap {
        [("A".to_string(), a), ("B".to_string(), b)].into()
    }

    #[test]
    fn backward_trace_prefers_latest_match() {
        let m = model();
        assert_eq!(predict_final(&m, &x(1.0, 1.0)).unwrap().iteration, 2);
        assert_eq!(predict_final(&m, &x(1.0, 0.0)).unwrap().cate, 1.5);
        assert_eq!(predict_final(&m, &x(0.0, 1.0)).unwrap().iteration, 1);
    }

    #[test]
    fn baseline_only_model_answers_from_iteration_zero() {
        let mut m = model();
        m.iterations.truncate(1);
        let p = predict_final(&m, &x(1.0, 1.0)).unwrap();
        assert_eq!((p.iteration, p.cate), (0, 0.0));
    }

    #[test]
    fn dropped_strata_fall_back_to_baseline() {
        let mut m = model();
        m.iterations[1].strata.truncate(1);
        let p = predict_final(&m, &x(1.0, 0.0)).unwrap();
        assert_eq!(p.iteration, 0);
    }

    #[test]
    fn missing_confounder_value_is_an_error() {
        let m = model();
        let partial: CovariateMap = [("B".to_string(), 1.0)].into();
        assert_eq!(predict_final(&m, &partial), Err(PredictError::MissingCovariate("A".into())));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let mut c = PipelineConfig::default();
        c.bootstrap.alpha = 1.0;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let back: PipelineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, PipelineConfig::default());
        assert_eq!(back.bootstrap.b, 64);
        assert_eq!((back.gather.k_retrieve, back.gather.k_keep), (10, 3));
    }

    #[test]
    fn termination_reads_naturally() {
        assert_eq!(Termination::EmptyConfounderSet { iteration: 4 }.to_string(), "empty C′ at iteration 4");
    }
}
