//! Expert gate over agent proposals: in-process policies and the shared
//! state the review HTTP service reads and writes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{ConfounderSet, Evidence};

#[derive(Debug, Error, PartialEq)]
pub enum ReviewError {
    #[error("review configuration error: {0}")]
    Config(String),
    #[error("timed out waiting for a decision on {0}")]
    Timeout(String),
    #[error("policy returned an incomplete decision set: {0}")]
    Incomplete(String),
    #[error("review run {0} was closed before a decision arrived")]
    Closed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Pending,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewCandidate {
    pub covariate: String,
    pub vote_count: usize,
    pub rationales: Vec<String>,
    pub evidence: Vec<Evidence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub run_id: String,
    pub item_id: String,
    pub iteration: usize,
    pub attempt: usize,
    pub candidates: Vec<ReviewCandidate>,
    pub status: ReviewStatus,
    pub decisions: BTreeMap<String, Decision>,
    pub decided_by: Option<String>,
    pub feedback: Option<String>,
    /// Unix seconds of the decision.
    pub decided_at: Option<u64>,
}

impl ReviewItem {
    pub fn new(run_id: &str, iteration: usize, attempt: usize, cs: &ConfounderSet) -> Self {
        Self {
            run_id: run_id.to_string(),
            item_id: format!("it{iteration}-a{attempt}"),
            iteration,
            attempt,
            candidates: cs
                .confounders
                .iter()
                .map(|c| ReviewCandidate {
                    covariate: c.covariate.clone(),
                    vote_count: c.vote_count,
                    rationales: c.rationales.clone(),
                    evidence: c.evidence.clone(),
                })
                .collect(),
            status: ReviewStatus::Pending,
            decisions: BTreeMap::new(),
            decided_by: None,
            feedback: None,
            decided_at: None,
        }
    }

    pub fn candidate_names(&self) -> BTreeSet<String> {
        self.candidates.iter().map(|c| c.covariate.clone()).collect()
    }

    /// Checks that `decisions` names every candidate and nothing else.
    pub fn check_complete(&self, decisions: &BTreeMap<String, Decision>) -> Result<(), String> {
        let names = self.candidate_names();
        if let Some(extra) = decisions.keys().find(|k| !names.contains(*k)) {
            return Err(format!("{extra} is not a candidate of {}", self.item_id));
        }
        let missing: Vec<&String> = names.iter().filter(|n| !decisions.contains_key(*n)).collect();
        if !missing.is_empty() {
            return Err(format!("no decision for {missing:?}"));
        }
        Ok(())
    }

    fn decide(&mut self, verdict: Verdict, by: &str) {
        self.decisions = verdict.decisions;
        self.feedback = verdict.feedback.filter(|f| !f.trim().is_empty());
        self.decided_by = Some(by.to_string());
        self.status = ReviewStatus::Decided;
        self.decided_at = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    }

    pub fn outcome(&self) -> ReviewOutcome {
        let pick = |want: Decision| {
            self.candidates
                .iter()
                .filter(|c| self.decisions.get(&c.covariate) == Some(&want))
                .map(|c| c.covariate.clone())
                .collect()
        };
        ReviewOutcome {
            item_id: self.item_id.clone(),
            iteration: self.iteration,
            attempt: self.attempt,
            accepted: pick(Decision::Accept),
            rejected: pick(Decision::Reject),
            feedback: self.feedback.clone(),
            decided_by: self.decided_by.clone().unwrap_or_default(),
        }
    }
}

/// Per-candidate decisions plus optional free-text feedback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decisions: BTreeMap<String, Decision>,
    #[serde(default)]
    pub feedback: Option<String>,
}

/// What a decided item means for the loop. Names keep candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub item_id: String,
    pub iteration: usize,
    pub attempt: usize,
    pub accepted: Vec<String>,
    pub rejected: Vec<String>,
    pub feedback: Option<String>,
    pub decided_by: String,
}

pub trait ExpertPolicy: Send + Sync {
    fn name(&self) -> String;
    /// Must return a decision for every candidate of `item`.
    fn decide(&self, item: &ReviewItem) -> Result<Verdict, ReviewError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AutoAccept;

impl ExpertPolicy for AutoAccept {
    fn name(&self) -> String {
        "auto_accept".into()
    }

    fn decide(&self, item: &ReviewItem) -> Result<Verdict, ReviewError> {
        Ok(Verdict {
            decisions: item.candidates.iter().map(|c| (c.covariate.clone(), Decision::Accept)).collect(),
            feedback: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDecision {
    pub iteration: usize,
    /// Absent: applies to every rework attempt of the iteration.
    #[serde(default)]
    pub attempt: Option<usize>,
    #[serde(default)]
    pub decisions: BTreeMap<String, Decision>,
    /// Applied to candidates not listed in `decisions`.
    #[serde(default)]
    pub default: Option<Decision>,
    #[serde(default)]
    pub feedback: Option<String>,
}

/// Fixture-driven decisions keyed by iteration and attempt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub entries: Vec<ScriptedDecision>,
}

impl ScriptedPolicy {
    pub fn load(path: &Path) -> Result<Self, ReviewError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReviewError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ReviewError::Config(format!("{}: {e}", path.display())))
    }
}

impl ExpertPolicy for ScriptedPolicy {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn decide(&self, item: &ReviewItem) -> Result<Verdict, ReviewError> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.iteration == item.iteration && e.attempt == Some(item.attempt))
            .or_else(|| self.entries.iter().find(|e| e.iteration == item.iteration && e.attempt.is_none()))
            .ok_or_else(|| {
                ReviewError::Config(format!("no scripted decision for iteration {} attempt {}", item.iteration, item.attempt))
            })?;
        let mut decisions = BTreeMap::new();
        for c in &item.candidates {
            let d = entry.decisions.get(&c.covariate).copied().or(entry.default).ok_or_else(|| {
                ReviewError::Config(format!("scripted decision for iteration {} does not cover {}", item.iteration, c.covariate))
            })?;
            decisions.insert(c.covariate.clone(), d);
        }
        Ok(Verdict { decisions, feedback: entry.feedback.clone() })
    }
}

/// Publishes the item to a [`ReviewStore`] and blocks until someone decides it.
#[derive(Clone)]
pub struct InteractivePolicy {
    pub store: ReviewStore,
    pub timeout: Option<Duration>,
}

impl ExpertPolicy for InteractivePolicy {
    fn name(&self) -> String {
        "interactive".into()
    }

    fn decide(&self, item: &ReviewItem) -> Result<Verdict, ReviewError> {
        self.store.open_item(item.clone());
        let decided = self.store.wait_decided(&item.run_id, &item.item_id, self.timeout)?;
        Ok(Verdict { decisions: decided.decisions, feedback: decided.feedback })
    }
}

/// Gates a non-empty confounder set through `policy`.
pub fn request_decision(
    cs: &ConfounderSet,
    policy: &dyn ExpertPolicy,
    run_id: &str,
    iteration: usize,
    attempt: usize,
) -> Result<ReviewItem, ReviewError> {
    let mut item = ReviewItem::new(run_id, iteration, attempt, cs);
    let verdict = policy.decide(&item)?;
    item.check_complete(&verdict.decisions).map_err(ReviewError::Incomplete)?;
    // Interactive decisions come from a person, not the policy.
    let by = match policy.name().as_str() {
        "interactive" => "human".to_string(),
        other => other.to_string(),
    };
    item.decide(verdict, &by);
    Ok(item)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    AwaitingReview,
    Completed,
    Aborted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub pending_reviews: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum SubmitError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("review item {0} is already decided")]
    Conflict(String),
    #[error("invalid decision: {0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
struct RunEntry {
    status: Option<RunStatus>,
    report: Value,
    traces: BTreeMap<usize, Vec<Value>>,
    items: Vec<ReviewItem>,
    closed: bool,
}

#[derive(Debug, Default)]
struct StoreState {
    runs: BTreeMap<String, RunEntry>,
    /// Set by [`ReviewStore::abort_all`]; runs registered afterwards start closed.
    shutting_down: bool,
}

/// Shared, thread-safe run and review state. Cloning shares the same store.
#[derive(Debug, Clone, Default)]
pub struct ReviewStore {
    inner: Arc<(Mutex<StoreState>, Condvar)>,
}

impl ReviewStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, StoreState> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn register_run(&self, run_id: &str) {
        let mut state = self.lock();
        let closed = state.shutting_down;
        let entry = state.runs.entry(run_id.to_string()).or_default();
        entry.status = Some(if closed { RunStatus::Aborted } else { RunStatus::Running });
        entry.closed = closed;
    }

    pub fn set_status(&self, run_id: &str, status: RunStatus) {
        let mut state = self.lock();
        let entry = state.runs.entry(run_id.to_string()).or_default();
        entry.status = Some(status);
        if matches!(status, RunStatus::Completed | RunStatus::Aborted | RunStatus::Failed) {
            entry.closed = true;
        }
        drop(state);
        self.inner.1.notify_all();
    }

    /// Marks every unfinished run aborted, releasing anything blocked in [`Self::wait_decided`].
    pub fn abort_all(&self) {
        let mut state = self.lock();
        state.shutting_down = true;
        for entry in state.runs.values_mut() {
            if !entry.closed {
                entry.status = Some(RunStatus::Aborted);
                entry.closed = true;
            }
        }
        drop(state);
        self.inner.1.notify_all();
    }

    pub fn set_report(&self, run_id: &str, report: Value) {
        self.lock().runs.entry(run_id.to_string()).or_default().report = report;
    }

    pub fn push_trace(&self, run_id: &str, iteration: usize, trace: Value) {
        self.lock().runs.entry(run_id.to_string()).or_default().traces.entry(iteration).or_default().push(trace);
    }

    /// Adds a pending item, or records an already-decided one.
    pub fn open_item(&self, item: ReviewItem) {
        let mut state = self.lock();
        let entry = state.runs.entry(item.run_id.clone()).or_default();
        if item.status == ReviewStatus::Pending {
            entry.status = Some(RunStatus::AwaitingReview);
        }
        match entry.items.iter_mut().find(|i| i.item_id == item.item_id) {
            Some(existing) => *existing = item,
            None => entry.items.push(item),
        }
    }

    pub fn list_runs(&self) -> Vec<RunSummary> {
        self.lock()
            .runs
            .iter()
            .map(|(id, entry)| RunSummary {
                run_id: id.clone(),
                status: entry.status.unwrap_or(RunStatus::Running),
                pending_reviews: entry.items.iter().filter(|i| i.status == ReviewStatus::Pending).count(),
            })
            .collect()
    }

    pub fn report(&self, run_id: &str) -> Option<Value> {
        self.lock().runs.get(run_id).map(|e| e.report.clone())
    }

    pub fn status(&self, run_id: &str) -> Option<RunStatus> {
        self.lock().runs.get(run_id).and_then(|e| e.status)
    }

    pub fn pending(&self, run_id: &str) -> Option<Vec<ReviewItem>> {
        self.lock()
            .runs
            .get(run_id)
            .map(|e| e.items.iter().filter(|i| i.status == ReviewStatus::Pending).cloned().collect())
    }

    pub fn items(&self, run_id: &str) -> Option<Vec<ReviewItem>> {
        self.lock().runs.get(run_id).map(|e| e.items.clone())
    }

    pub fn traces(&self, run_id: &str, iteration: usize) -> Option<Vec<Value>> {
        self.lock().runs.get(run_id).and_then(|e| e.traces.get(&iteration).cloned())
    }

    /// Applies a human decision; the only allowed transition is pending → decided.
    pub fn submit(&self, run_id: &str, item_id: &str, verdict: Verdict) -> Result<ReviewItem, SubmitError> {
        let mut state = self.lock();
        let entry = state.runs.get_mut(run_id).ok_or_else(|| SubmitError::NotFound(format!("run {run_id}")))?;
        let item = entry
            .items
            .iter_mut()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| SubmitError::NotFound(format!("review item {item_id}")))?;
        if item.status != ReviewStatus::Pending {
            return Err(SubmitError::Conflict(item_id.to_string()));
        }
        item.check_complete(&verdict.decisions).map_err(SubmitError::Invalid)?;
        item.decide(verdict, "human");
        let decided = item.clone();
        if entry.status == Some(RunStatus::AwaitingReview) {
            entry.status = Some(RunStatus::Running);
        }
        drop(state);
        self.inner.1.notify_all();
        Ok(decided)
    }

    /// Blocks until the item is decided, the run is closed, or `timeout` passes.
    pub fn wait_decided(&self, run_id: &str, item_id: &str, timeout: Option<Duration>) -> Result<ReviewItem, ReviewError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut state = self.lock();
        loop {
            if let Some(entry) = state.runs.get(run_id) {
                if let Some(item) = entry.items.iter().find(|i| i.item_id == item_id && i.status == ReviewStatus::Decided) {
                    return Ok(item.clone());
                }
                if entry.closed {
                    return Err(ReviewError::Closed(run_id.to_string()));
                }
            }
            match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(ReviewError::Timeout(item_id.to_string()));
                    }
                    state = self.inner.1.wait_timeout(state, d - now).unwrap_or_else(|p| p.into_inner()).0;
                }
                None => state = self.inner.1.wait(state).unwrap_or_else(|p| p.into_inner()),
            }
        }
    }
}
