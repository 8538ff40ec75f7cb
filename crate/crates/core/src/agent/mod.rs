//! Confounder discovery over tree partitions.
//!
//! Per leaf: explain the rule, decompose it into sub-queries, gather knowledge
//! for each, reason about confounders. Per-leaf candidates are then pooled by
//! vote counting.

mod backend;
pub mod prompts;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::causal_tree::{extract_rules, Partition, SplitRule};
use crate::dataset::CovariateMeta;
use crate::knowledge::{gather, GatherConfig, GatherTrace, KnowledgeBase, KnowledgeItem, Provenance, SourcePref};

pub use backend::{
    AgentBackend, BackendError, CallContext, CompletionRequest, HttpBackend, HttpBackendConfig, MockBackend, MockScript,
    ReplayBackend, ResponseSchema, ScriptEntry, Stage, LLM_KEY_ENV,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("partition has no leaves")]
    EmptyPartition,
    #[error("{stage} stage for leaf {leaf_id}: response failed schema validation after {tries} tries: {last}")]
    SchemaViolation { stage: &'static str, leaf_id: usize, tries: usize, last: String },
    #[error("invalid agent configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_retries: usize,
    pub max_subqueries: usize,
    /// `None` means 1 for a single ballot, otherwise 2.
    pub min_votes: Option<usize>,
    pub parallelism: usize,
    /// Independent reasoning completions per rule; each is one ballot.
    pub self_consistency: usize,
    pub treatment_label: String,
    pub outcome_label: String,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            max_subqueries: 4,
            min_votes: None,
            parallelism: 2,
            self_consistency: 1,
            treatment_label: "the treatment".into(),
            outcome_label: "the outcome".into(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_subqueries == 0 {
            return Err(AgentError::Config("max_subqueries must be at least 1".into()));
        }
        if self.self_consistency == 0 {
            return Err(AgentError::Config("self_consistency must be at least 1".into()));
        }
        if self.min_votes == Some(0) {
            return Err(AgentError::Config("min_votes must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loop state the agent needs for one invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentContext {
    pub iteration: usize,
    /// Rework round within the iteration, 0 for the first pass.
    pub attempt: usize,
    pub validated: BTreeSet<String>,
    /// Names the expert rejected in earlier rounds of this iteration.
    pub rejected: BTreeSet<String>,
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub leaf_id: usize,
    pub conjunction: Vec<SplitRule>,
    pub text: String,
    pub described: String,
    pub cate: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub narrative: String,
    pub covariate_descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuery {
    pub rule_leaf_id: usize,
    pub text: String,
    pub source_pref: SourcePref,
}

/// A knowledge item cited in support of a candidate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Evidence {
    pub chunk_id: String,
    pub source: String,
    pub provenance: Provenance,
    pub text: String,
}

impl Evidence {
    fn from_item(item: &KnowledgeItem) -> Self {
        Self {
            chunk_id: item.chunk.id.clone(),
            source: item.chunk.source.clone(),
            provenance: item.provenance,
            text: item.chunk.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfounder {
    pub covariate: String,
    pub rationale: String,
    pub evidence: Vec<Evidence>,
    pub rule_leaf_id: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderVote {
    pub covariate: String,
    pub vote_count: usize,
    pub rationales: Vec<String>,
    pub evidence: Vec<Evidence>,
    pub rule_leaf_ids: Vec<usize>,
}

/// One rule's (or one self-consistency sample's) proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ballot {
    pub rule_leaf_id: usize,
    pub sample: usize,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSet {
    pub confounders: Vec<ConfounderVote>,
    pub provenance: Vec<Ballot>,
    pub min_votes: usize,
}

impl ConfounderSet {
    pub fn is_empty(&self) -> bool {
        self.confounders.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.confounders.iter().map(|c| c.covariate.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentEventKind {
    /// Explanation unavailable; the rule went on without a narrative.
    Degraded,
    /// Decomposition unavailable; templated sub-queries were used.
    Fallback,
    Hallucination,
    AlreadyValidated,
    NoKnowledge,
    SchemaViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentEvent {
    pub kind: AgentEventKind,
    pub leaf_id: usize,
    pub stage: Stage,
    pub detail: String,
}

/// One backend call, including failed tries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub leaf_id: usize,
    pub stage: Stage,
    pub sample: usize,
    pub try_index: usize,
    pub prompt_hash: String,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatherRecord {
    pub rule_leaf_id: usize,
    pub subquery_index: usize,
    pub trace: GatherTrace,
    pub items: Vec<KnowledgeItem>,
}

/// Everything one agent invocation did, ordered by leaf then stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub iteration: usize,
    pub attempt: usize,
    pub backend: String,
    pub rules: Vec<Rule>,
    pub subqueries: Vec<SubQuery>,
    pub gathers: Vec<GatherRecord>,
    pub candidates: Vec<CandidateConfounder>,
    pub events: Vec<AgentEvent>,
    pub calls: Vec<CallRecord>,
    pub result: ConfounderSet,
}

/// Backend, metadata and retrieval shared by every stage.
pub struct AgentEnv<'a> {
    pub backend: &'a dyn AgentBackend,
    pub kb: &'a KnowledgeBase,
    pub gather: &'a GatherConfig,
    pub meta: &'a [CovariateMeta],
    pub config: &'a AgentConfig,
}

/// Per-leaf accumulator for calls and events; merged into the trace in leaf order.
#[derive(Debug, Default)]
pub struct StageLog {
    pub calls: Vec<CallRecord>,
    pub events: Vec<AgentEvent>,
}

impl StageLog {
    fn event(&mut self, kind: AgentEventKind, leaf_id: usize, stage: Stage, detail: String) {
        warn!(?kind, leaf_id, stage = stage.as_str(), "{detail}");
        self.events.push(AgentEvent { kind, leaf_id, stage, detail });
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NarrativeReply {
    narrative: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubQueryReply {
    subqueries: Vec<SubQueryItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubQueryItem {
    text: String,
    source: SourcePref,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfounderReply {
    confounders: Vec<ConfounderItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfounderItem {
    covariate: String,
    rationale: String,
}

fn parse_reply<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, String> {
    let value: Value = serde_json::from_str(text.trim()).map_err(|e| format!("not JSON: {e}"))?;
    serde_json::from_value(value).map_err(|e| format!("schema mismatch: {e}"))
}

/// Calls the backend until the reply parses and passes `check`, up to `1 + max_retries` tries.
fn call_structured<T: serde::de::DeserializeOwned>(
    env: &AgentEnv<'_>,
    ctx: CallContext,
    prompt: String,
    schema: ResponseSchema,
    check: impl Fn(&T) -> Result<(), String>,
    log: &mut StageLog,
) -> Result<T, AgentError> {
    let tries = env.config.max_retries + 1;
    let prompt_hash = prompts::sha256_hex(&prompt);
    let request = CompletionRequest { context: ctx, prompt, schema };
    let mut last = String::new();
    for try_index in 0..tries {
        let mut record = CallRecord {
            leaf_id: ctx.leaf_id,
            stage: ctx.stage,
            sample: ctx.sample,
            try_index,
            prompt_hash: prompt_hash.clone(),
            prompt: request.prompt.clone(),
            response: None,
            error: None,
            valid: false,
        };
        let outcome = match env.backend.complete(&request) {
            Ok(text) => {
                record.response = Some(text.clone());
                parse_reply::<T>(&text).and_then(|parsed| check(&parsed).map(|()| parsed))
            }
            Err(e) => Err(e.to_string()),
        };
        match outcome {
            Ok(parsed) => {
                record.valid = true;
                log.calls.push(record);
                return Ok(parsed);
            }
            Err(e) => {
                debug!(leaf_id = ctx.leaf_id, stage = ctx.stage.as_str(), try_index, error = %e, "rejected backend reply");
                record.error = Some(e.clone());
                log.calls.push(record);
                last = e;
            }
        }
    }
    Err(AgentError::SchemaViolation { stage: ctx.stage.as_str(), leaf_id: ctx.leaf_id, tries, last })
}

fn describe_covariate(meta: &[CovariateMeta], name: &str) -> String {
    match meta.iter().find(|m| m.name == name) {
        Some(m) if !m.description.is_empty() => m.description.clone(),
        _ => name.to_string(),
    }
}

fn covariate_line(m: &CovariateMeta) -> String {
    let kind = serde_json::to_value(m.kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    if m.levels.is_empty() {
        format!("- {}: {} ({kind})", m.name, m.description)
    } else {
        format!("- {}: {} ({kind}; levels {})", m.name, m.description, m.levels.join(", "))
    }
}

/// Mechanical part of the rules: conjunction, CATE, counts and descriptions, no narrative yet.
pub fn rules_from_partition(p: &Partition, meta: &[CovariateMeta]) -> Result<Vec<Rule>, AgentError> {
    if p.leaves.is_empty() {
        return Err(AgentError::EmptyPartition);
    }
    Ok(extract_rules(p, meta)
        .into_iter()
        .map(|r| {
            let mut seen = BTreeSet::new();
            let covariate_descriptions = r
                .conjunction
                .iter()
                .filter(|s| seen.insert(s.covariate.clone()))
                .map(|s| format!("{}: {}", s.covariate, describe_covariate(meta, &s.covariate)))
                .collect();
            Rule {
                leaf_id: r.leaf_id,
                conjunction: r.conjunction,
                text: r.text,
                described: r.described,
                cate: r.cate,
                n_treated: r.n_treated,
                n_control: r.n_control,
                narrative: String::new(),
                covariate_descriptions,
            }
        })
        .collect())
}

fn explain_rule(rule: &mut Rule, env: &AgentEnv<'_>, ctx: &AgentContext, log: &mut StageLog) {
    let referenced: BTreeSet<&str> = rule.conjunction.iter().map(|s| s.covariate.as_str()).collect();
    let covariates = if referenced.is_empty() {
        "(none: the rule covers the entire population)".to_string()
    } else {
        env.meta.iter().filter(|m| referenced.contains(m.name.as_str())).map(covariate_line).collect::<Vec<_>>().join("\n")
    };
    let prompt = prompts::render(
        prompts::EXPLAIN,
        &[
            ("treatment", env.config.treatment_label.clone()),
            ("outcome", env.config.outcome_label.clone()),
            ("leaf_id", rule.leaf_id.to_string()),
            ("rule", rule.described.clone()),
            ("cate", format!("{:.4}", rule.cate)),
            ("n_treated", rule.n_treated.to_string()),
            ("n_control", rule.n_control.to_string()),
            ("covariates", covariates),
        ],
    );
    let call = CallContext { iteration: ctx.iteration, attempt: ctx.attempt, stage: Stage::Explain, leaf_id: rule.leaf_id, sample: 0 };
    match call_structured::<NarrativeReply>(env, call, prompt, ResponseSchema::Narrative, |_| Ok(()), log) {
        Ok(reply) => rule.narrative = reply.narrative,
        Err(e) => log.event(AgentEventKind::Degraded, rule.leaf_id, Stage::Explain, e.to_string()),
    }
}

/// One narrative call per leaf; failures leave the narrative empty and log a degradation event.
pub fn explain_partition(
    p: &Partition,
    env: &AgentEnv<'_>,
    ctx: &AgentContext,
    log: &mut StageLog,
) -> Result<Vec<Rule>, AgentError> {
    let mut rules = rules_from_partition(p, env.meta)?;
    for rule in &mut rules {
        explain_rule(rule, env, ctx, log);
    }
    Ok(rules)
}

/// Sub-queries used when the backend cannot decompose a rule: one per conjunct,
/// or one generic question for the whole-population rule.
pub fn fallback_subqueries(rule: &Rule, meta: &[CovariateMeta], treatment: &str, outcome: &str) -> Vec<SubQuery> {
    let make = |text: String| SubQuery { rule_leaf_id: rule.leaf_id, text, source_pref: SourcePref::Rag };
    if rule.conjunction.is_empty() {
        return vec![make(format!("Which patient characteristics affect {outcome} under {treatment}?"))];
    }
    rule.conjunction
        .iter()
        .map(|s| make(format!("How does {} affect {outcome} under {treatment}?", describe_covariate(meta, &s.covariate))))
        .collect()
}

pub fn decompose(rule: &Rule, env: &AgentEnv<'_>, ctx: &AgentContext, log: &mut StageLog) -> Vec<SubQuery> {
    let max = env.config.max_subqueries;
    let prompt = prompts::render(
        prompts::DECOMPOSE,
        &[
            ("treatment", env.config.treatment_label.clone()),
            ("outcome", env.config.outcome_label.clone()),
            ("leaf_id", rule.leaf_id.to_string()),
            ("rule", rule.described.clone()),
            ("cate", format!("{:.4}", rule.cate)),
            ("narrative", if rule.narrative.is_empty() { "(none)".into() } else { rule.narrative.clone() }),
            ("max_subqueries", max.to_string()),
        ],
    );
    let call = CallContext { iteration: ctx.iteration, attempt: ctx.attempt, stage: Stage::Decompose, leaf_id: rule.leaf_id, sample: 0 };
    let check = |reply: &SubQueryReply| {
        if reply.subqueries.is_empty() || reply.subqueries.len() > max {
            return Err(format!("expected 1..={max} sub-queries, got {}", reply.subqueries.len()));
        }
        if reply.subqueries.iter().any(|q| q.text.trim().is_empty()) {
            return Err("empty sub-query text".into());
        }
        Ok(())
    };
    match call_structured::<SubQueryReply>(env, call, prompt, ResponseSchema::SubQueries, check, log) {
        Ok(reply) => reply
            .subqueries
            .into_iter()
            .map(|q| SubQuery { rule_leaf_id: rule.leaf_id, text: q.text.trim().to_string(), source_pref: q.source })
            .collect(),
        Err(e) => {
            log.event(AgentEventKind::Fallback, rule.leaf_id, Stage::Decompose, e.to_string());
            fallback_subqueries(rule, env.meta, &env.config.treatment_label, &env.config.outcome_label)
        }
    }
}

fn knowledge_section(subqueries: &[SubQuery], knowledge: &[Vec<KnowledgeItem>]) -> String {
    if knowledge.iter().all(Vec::is_empty) {
        return "none retrieved".into();
    }
    let mut out = Vec::new();
    for (q, items) in subqueries.iter().zip(knowledge) {
        out.push(format!("Q: {}", q.text));
        if items.is_empty() {
            out.push("  none retrieved".into());
        }
        for item in items {
            let provenance = match item.provenance {
                Provenance::Rag => "rag",
                Provenance::Tool => "tool",
            };
            out.push(format!("  [{} | {} | {provenance}] {}", item.chunk.id, item.chunk.source, item.chunk.text.trim()));
        }
    }
    out.join("\n")
}

/// Confounder proposals for one rule, filtered to known, not-yet-validated covariates.
pub fn reason_confounders(
    rule: &Rule,
    subqueries: &[SubQuery],
    knowledge: &[Vec<KnowledgeItem>],
    sample: usize,
    env: &AgentEnv<'_>,
    ctx: &AgentContext,
    log: &mut StageLog,
) -> Vec<CandidateConfounder> {
    let candidates: Vec<String> =
        env.meta.iter().filter(|m| !ctx.validated.contains(&m.name)).map(covariate_line).collect();
    let list = |names: &BTreeSet<String>| {
        if names.is_empty() {
            "none".to_string()
        } else {
            names.iter().cloned().collect::<Vec<_>>().join(", ")
        }
    };
    let mut feedback = String::new();
    if !ctx.rejected.is_empty() {
        feedback.push_str(&format!("The domain expert rejected these proposals: {}.\n", list(&ctx.rejected)));
    }
    if let Some(text) = ctx.feedback.as_deref().filter(|t| !t.trim().is_empty()) {
        feedback.push_str(&format!("Expert feedback: {}\n", text.trim()));
    }
    let prompt = prompts::render(
        prompts::REASON,
        &[
            ("treatment", env.config.treatment_label.clone()),
            ("outcome", env.config.outcome_label.clone()),
            ("leaf_id", rule.leaf_id.to_string()),
            ("rule", rule.described.clone()),
            ("cate", format!("{:.4}", rule.cate)),
            ("narrative", if rule.narrative.is_empty() { "(none)".into() } else { rule.narrative.clone() }),
            ("knowledge", knowledge_section(subqueries, knowledge)),
            ("candidates", if candidates.is_empty() { "(none)".into() } else { candidates.join("\n") }),
            ("validated", list(&ctx.validated)),
            ("feedback", feedback),
        ],
    );
    let call = CallContext { iteration: ctx.iteration, attempt: ctx.attempt, stage: Stage::Reason, leaf_id: rule.leaf_id, sample };
    let reply = match call_structured::<ConfounderReply>(env, call, prompt, ResponseSchema::Confounders, |_| Ok(()), log) {
        Ok(r) => r,
        Err(e) => {
            log.event(AgentEventKind::SchemaViolation, rule.leaf_id, Stage::Reason, e.to_string());
            return Vec::new();
        }
    };
    let mut evidence: Vec<Evidence> = knowledge.iter().flatten().map(Evidence::from_item).collect();
    evidence.sort();
    evidence.dedup();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for item in reply.confounders {
        let proposed = item.covariate.trim();
        let Some(meta) = env.meta.iter().find(|m| m.name.eq_ignore_ascii_case(proposed)) else {
            log.event(AgentEventKind::Hallucination, rule.leaf_id, Stage::Reason, format!("unknown covariate {proposed:?} dropped"));
            continue;
        };
        if ctx.validated.contains(&meta.name) {
            log.event(AgentEventKind::AlreadyValidated, rule.leaf_id, Stage::Reason, format!("{} already validated", meta.name));
            continue;
        }
        if !seen.insert(meta.name.clone()) {
            continue;
        }
        out.push(CandidateConfounder {
            covariate: meta.name.clone(),
            rationale: item.rationale,
            evidence: evidence.clone(),
            rule_leaf_id: rule.leaf_id,
            sample,
        });
    }
    out
}

pub fn default_min_votes(ballots: usize) -> usize {
    if ballots <= 1 {
        1
    } else {
        2
    }
}

/// Vote counting across ballots. A covariate's vote count is the number of
/// distinct (rule, sample) ballots naming it; the result does not depend on
/// ballot order.
pub fn ensemble(ballots: &[Vec<CandidateConfounder>], min_votes: Option<usize>) -> ConfounderSet {
    let min_votes = min_votes.unwrap_or_else(|| default_min_votes(ballots.len()));
    let mut tally: BTreeMap<String, (BTreeSet<(usize, usize)>, BTreeSet<String>, BTreeSet<Evidence>)> = BTreeMap::new();
    let mut provenance = Vec::new();
    for (index, ballot) in ballots.iter().enumerate() {
        let (leaf, sample) = ballot.first().map(|c| (c.rule_leaf_id, c.sample)).unwrap_or((usize::MAX, index));
        let mut covariates: Vec<String> = Vec::new();
        for c in ballot {
            let entry = tally.entry(c.covariate.clone()).or_default();
            entry.0.insert((c.rule_leaf_id, c.sample));
            entry.1.insert(c.rationale.clone());
            entry.2.extend(c.evidence.iter().cloned());
            covariates.push(c.covariate.clone());
        }
        covariates.sort();
        covariates.dedup();
        if !ballot.is_empty() {
            provenance.push(Ballot { rule_leaf_id: leaf, sample, covariates });
        }
    }
    provenance.sort_by(|a, b| (a.rule_leaf_id, a.sample, &a.covariates).cmp(&(b.rule_leaf_id, b.sample, &b.covariates)));
    let mut confounders: Vec<ConfounderVote> = tally
        .into_iter()
        .map(|(covariate, (voters, rationales, evidence))| {
            let mut rule_leaf_ids: Vec<usize> = voters.iter().map(|v| v.0).collect();
            rule_leaf_ids.dedup();
            ConfounderVote {
                covariate,
                vote_count: voters.len(),
                rationales: rationales.into_iter().collect(),
                evidence: evidence.into_iter().collect(),
                rule_leaf_ids,
            }
        })
        .filter(|v| v.vote_count >= min_votes)
        .collect();
    confounders.sort_by(|a, b| b.vote_count.cmp(&a.vote_count).then_with(|| a.covariate.cmp(&b.covariate)));
    ConfounderSet { confounders, provenance, min_votes }
}

struct LeafOutcome {
    rule: Rule,
    subqueries: Vec<SubQuery>,
    gathers: Vec<GatherRecord>,
    ballots: Vec<Vec<CandidateConfounder>>,
    log: StageLog,
}

fn run_leaf(mut rule: Rule, env: &AgentEnv<'_>, ctx: &AgentContext) -> LeafOutcome {
    let mut log = StageLog::default();
    explain_rule(&mut rule, env, ctx, &mut log);
    let subqueries = decompose(&rule, env, ctx, &mut log);
    let mut gathers = Vec::new();
    let mut knowledge = Vec::new();
    for (i, q) in subqueries.iter().enumerate() {
        let (items, trace) = gather(env.kb, &q.text, q.source_pref, env.gather);
        if trace.no_knowledge {
            log.event(AgentEventKind::NoKnowledge, rule.leaf_id, Stage::Reason, format!("no knowledge for {:?}", q.text));
        }
        gathers.push(GatherRecord { rule_leaf_id: rule.leaf_id, subquery_index: i, trace, items: items.clone() });
        knowledge.push(items);
    }
    let ballots = (0..env.config.self_consistency)
        .map(|sample| reason_confounders(&rule, &subqueries, &knowledge, sample, env, ctx, &mut log))
        .collect();
    LeafOutcome { rule, subqueries, gathers, ballots, log }
}

/// Explain, decompose, gather, reason for every leaf, then ensemble.
///
/// Leaves run on a pool of `config.parallelism` threads; the trace is assembled
/// in leaf order so scheduling never shows in the output.
pub fn run_agent_iteration(p: &Partition, env: &AgentEnv<'_>, ctx: &AgentContext) -> Result<(ConfounderSet, AgentTrace), AgentError> {
    env.config.validate()?;
    let mut rules = rules_from_partition(p, env.meta)?;
    rules.sort_by_key(|r| r.leaf_id);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(env.config.parallelism.max(1))
        .build()
        .map_err(|e| AgentError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<LeafOutcome> = pool.install(|| {
        use rayon::prelude::*;
        rules.into_par_iter().map(|rule| run_leaf(rule, env, ctx)).collect()
    });
    let mut trace = AgentTrace {
        iteration: ctx.iteration,
        attempt: ctx.attempt,
        backend: env.backend.name(),
        rules: Vec::new(),
        subqueries: Vec::new(),
        gathers: Vec::new(),
        candidates: Vec::new(),
        events: Vec::new(),
        calls: Vec::new(),
        result: ConfounderSet::default(),
    };
    let mut ballots = Vec::new();
    for outcome in outcomes {
        trace.rules.push(outcome.rule);
        trace.subqueries.extend(outcome.subqueries);
        trace.gathers.extend(outcome.gathers);
        trace.candidates.extend(outcome.ballots.iter().flatten().cloned());
        trace.events.extend(outcome.log.events);
        trace.calls.extend(outcome.log.calls);
        ballots.extend(outcome.ballots);
    }
    let set = ensemble(&ballots, env.config.min_votes);
    trace.result = set.clone();
    Ok((set, trace))
}
