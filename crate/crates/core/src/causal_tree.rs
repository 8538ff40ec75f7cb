//! Honest causal trees.
//!
//! Nodes are split greedily on the heterogeneity gain
//! `Σ_children n_c·τ̂_c² − n_parent·τ̂_parent²`, where `τ̂` is the
//! treated-minus-control difference in mean outcomes. With honesty enabled
//! each arm is halved under the seed: one half chooses the structure, the
//! other half supplies every leaf estimate and count.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CovariateKind, CovariateMap, CovariateMeta, Dataset, RowId};
use crate::rng::{rng_from, stream, sub_seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("covariate list is empty")]
    EmptyCovariates,
    #[error("unknown covariate {0}")]
    UnknownCovariate(String),
    #[error("treatment arm too small to fit: {treated} treated, {control} control, need {required} per arm")]
    ArmTooSmall { treated: usize, control: usize, required: usize },
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
    #[error("missing value for covariate {0}")]
    MissingCovariate(String),
    #[error("empty treatment arm")]
    EmptyArm,
    #[error("partition has no leaves")]
    EmptyPartition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf_per_arm: usize,
    pub min_split_gain: f64,
    pub honest: bool,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: 4, min_leaf_per_arm: 15, min_split_gain: 1e-4, honest: true, seed: 0 }
    }
}

impl TreeParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        if self.max_depth < 1 {
            return Err(TreeError::InvalidParams("max_depth must be at least 1".into()));
        }
        if self.min_leaf_per_arm < 1 {
            return Err(TreeError::InvalidParams("min_leaf_per_arm must be at least 1".into()));
        }
        if !(self.min_split_gain >= 0.0) {
            return Err(TreeError::InvalidParams("min_split_gain must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Comparison {
    LessEq { threshold: f64 },
    Greater { threshold: f64 },
    Equals { level: String, code: usize },
    NotEquals { level: String, code: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRule {
    pub covariate: String,
    #[serde(flatten)]
    pub comparison: Comparison,
}

impl SplitRule {
    pub fn equals(meta: &CovariateMeta, code: usize) -> Self {
        Self {
            covariate: meta.name.clone(),
            comparison: Comparison::Equals { level: meta.levels[code].clone(), code },
        }
    }

    /// Evaluates the rule on a stored covariate value.
    pub fn holds(&self, value: f64) -> bool {
        match &self.comparison {
            Comparison::LessEq { threshold } => value <= *threshold,
            Comparison::Greater { threshold } => value > *threshold,
            Comparison::Equals { code, .. } => value == *code as f64,
            Comparison::NotEquals { code, .. } => value != *code as f64,
        }
    }

    fn operator(&self) -> (&'static str, String) {
        match &self.comparison {
            Comparison::LessEq { threshold } => ("<=", format!("{threshold}")),
            Comparison::Greater { threshold } => (">", format!("{threshold}")),
            Comparison::Equals { level, .. } => ("==", level.clone()),
            Comparison::NotEquals { level, .. } => ("!=", level.clone()),
        }
    }

    /// Like `Display`, with the covariate description in parentheses.
    pub fn describe(&self, meta: &[CovariateMeta]) -> String {
        let (op, value) = self.operator();
        match meta.iter().find(|m| m.name == self.covariate) {
            Some(m) if !m.description.is_empty() => {
                format!("{} ({}) {op} {value}", self.covariate, m.description)
            }
            _ => format!("{} {op} {value}", self.covariate),
        }
    }
}

impl fmt::Display for SplitRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, value) = self.operator();
        write!(f, "{} {op} {value}", self.covariate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub id: usize,
    pub path: Vec<SplitRule>,
    pub cate: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

impl Leaf {
    pub fn matches(&self, x: &CovariateMap) -> Result<bool, TreeError> {
        for rule in &self.path {
            let v = x
                .get(&rule.covariate)
                .ok_or_else(|| TreeError::MissingCovariate(rule.covariate.clone()))?;
            if !rule.holds(*v) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf(Leaf),
    Split {
        gain: f64,
        n: usize,
        left_rule: SplitRule,
        right_rule: SplitRule,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub tree_id: String,
    pub covariates: Vec<String>,
    pub fit_params: TreeParams,
    pub root: Node,
}

/// A tree's leaves with their paths; mutually exclusive and exhaustive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub tree_id: String,
    pub leaves: Vec<Leaf>,
    pub fit_params: TreeParams,
}

impl Partition {
    /// Merges stratum partitions into one, prefixing each leaf path with the
    /// stratum's equality rules and renumbering leaves consecutively.
    pub fn combine(tree_id: &str, parts: Vec<(Vec<SplitRule>, Partition)>) -> Partition {
        let fit_params = parts.first().map(|(_, p)| p.fit_params).unwrap_or_default();
        let mut leaves = Vec::new();
        for (prefix, part) in parts {
            for leaf in part.leaves {
                let mut path = prefix.clone();
                path.extend(leaf.path);
                leaves.push(Leaf { id: leaves.len(), path, ..leaf });
            }
        }
        Partition { tree_id: tree_id.to_string(), leaves, fit_params }
    }
}

impl Tree {
    pub fn partition(&self) -> Partition {
        let mut leaves = Vec::new();
        collect_leaves(&self.root, &mut leaves);
        Partition { tree_id: self.tree_id.clone(), leaves, fit_params: self.fit_params }
    }

    pub fn n_leaves(&self) -> usize {
        self.partition().leaves.len()
    }

    /// Routes a covariate map to its leaf.
    pub fn assign_leaf(&self, x: &CovariateMap) -> Result<&Leaf, TreeError> {
        self.route(|name| x.get(name).copied())
    }

    /// Routes a dataset row to its leaf.
    pub fn leaf_for_row(&self, ds: &Dataset, row: RowId) -> Result<&Leaf, TreeError> {
        self.route(|name| ds.column_index(name).map(|c| ds.value(row, c)))
    }

    fn route<F: Fn(&str) -> Option<f64>>(&self, lookup: F) -> Result<&Leaf, TreeError> {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(leaf) => return Ok(leaf),
                Node::Split { left_rule, left, right, .. } => {
                    let v = lookup(&left_rule.covariate)
                        .ok_or_else(|| TreeError::MissingCovariate(left_rule.covariate.clone()))?;
                    node = if left_rule.holds(v) { left } else { right };
                }
            }
        }
    }

    /// Covariates referenced by any split.
    pub fn split_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for leaf in self.partition().leaves {
            for rule in leaf.path {
                if !out.contains(&rule.covariate) {
                    out.push(rule.covariate);
                }
            }
        }
        out
    }
}

fn collect_leaves(node: &Node, out: &mut Vec<Leaf>) {
    match node {
        Node::Leaf(leaf) => out.push(leaf.clone()),
        Node::Split { left, right, .. } => {
            collect_leaves(left, out);
            collect_leaves(right, out);
        }
    }
}

/// Difference in mean outcomes, treated minus control.
pub fn leaf_cate(treated_outcomes: &[f64], control_outcomes: &[f64]) -> Result<f64, TreeError> {
    if treated_outcomes.is_empty() || control_outcomes.is_empty() {
        return Err(TreeError::EmptyArm);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(treated_outcomes) - mean(control_outcomes))
}

/// Splits a (multi)set of rows into the structure half and the estimate half.
///
/// Each arm is shuffled under the seed and halved separately, so both halves
/// keep at least `min_leaf_per_arm` per arm whenever the fit precondition
/// holds. Without honesty both halves are the full input.
pub fn honest_halves(ds: &Dataset, rows: &[RowId], params: &TreeParams) -> (Vec<RowId>, Vec<RowId>) {
    if !params.honest {
        return (rows.to_vec(), rows.to_vec());
    }
    let mut rng = rng_from(sub_seed(params.seed, stream::TREE));
    let mut split = Vec::with_capacity(rows.len() / 2 + 1);
    let mut estimate = Vec::with_capacity(rows.len() / 2 + 1);
    for arm in [1u8, 0u8] {
        let mut members: Vec<RowId> = rows.iter().copied().filter(|&r| ds.sample(r).treatment == arm).collect();
        members.shuffle(&mut rng);
        let half = members.len() / 2;
        split.extend_from_slice(&members[..half]);
        estimate.extend_from_slice(&members[half..]);
    }
    split.sort_unstable();
    estimate.sort_unstable();
    (split, estimate)
}

/// Fits a causal tree on `rows` (duplicates allowed) over `covariates`.
pub fn fit_tree(ds: &Dataset, rows: &[RowId], covariates: &[String], params: &TreeParams) -> Result<Tree, TreeError> {
    params.validate()?;
    if covariates.is_empty() {
        return Err(TreeError::EmptyCovariates);
    }
    let mut columns = Vec::with_capacity(covariates.len());
    for name in covariates {
        let c = ds.column_index(name).ok_or_else(|| TreeError::UnknownCovariate(name.clone()))?;
        columns.push(c);
    }
    let treated = rows.iter().filter(|&&r| ds.sample(r).is_treated()).count();
    let control = rows.len() - treated;
    let required = 2 * params.min_leaf_per_arm;
    if treated < required || control < required {
        return Err(TreeError::ArmTooSmall { treated, control, required });
    }
    let (split_rows, est_rows) = honest_halves(ds, rows, params);
    let grower = Grower { ds, columns: &columns, params };
    let mut root = grower.grow(to_obs(ds, &split_rows), to_obs(ds, &est_rows), 0, Vec::new());
    let mut next_id = 0;
    number_leaves(&mut root, &mut next_id);
    Ok(Tree {
        tree_id: format!("tree-{:016x}", params.seed),
        covariates: covariates.to_vec(),
        fit_params: *params,
        root,
    })
}

fn number_leaves(node: &mut Node, next: &mut usize) {
    match node {
        Node::Leaf(leaf) => {
            leaf.id = *next;
            *next += 1;
        }
        Node::Split { left, right, .. } => {
            number_leaves(left, next);
            number_leaves(right, next);
        }
    }
}

#[derive(Clone, Copy)]
struct Obs {
    row: RowId,
    treated: bool,
    y: f64,
}

fn to_obs(ds: &Dataset, rows: &[RowId]) -> Vec<Obs> {
    rows.iter()
        .map(|&row| {
            let s = ds.sample(row);
            Obs { row, treated: s.is_treated(), y: s.outcome }
        })
        .collect()
}

#[derive(Default, Clone, Copy)]
struct ArmStats {
    n_t: usize,
    sum_t: f64,
    n_c: usize,
    sum_c: f64,
}

impl ArmStats {
    fn of(obs: &[Obs]) -> Self {
        let mut s = Self::default();
        for o in obs {
            s.add(o);
        }
        s
    }

    fn add(&mut self, o: &Obs) {
        if o.treated {
            self.n_t += 1;
            self.sum_t += o.y;
        } else {
            self.n_c += 1;
            self.sum_c += o.y;
        }
    }

    fn minus(&self, other: &Self) -> Self {
        Self {
            n_t: self.n_t - other.n_t,
            sum_t: self.sum_t - other.sum_t,
            n_c: self.n_c - other.n_c,
            sum_c: self.sum_c - other.sum_c,
        }
    }

    fn n(&self) -> usize {
        self.n_t + self.n_c
    }

    fn tau(&self) -> f64 {
        self.sum_t / self.n_t as f64 - self.sum_c / self.n_c as f64
    }

    /// `n·τ̂²`, the node's contribution to the heterogeneity criterion.
    fn score(&self) -> f64 {
        let tau = self.tau();
        self.n() as f64 * tau * tau
    }
}

enum CandidateKind {
    Threshold(f64),
    Level(usize),
}

struct Candidate {
    column: usize,
    gain: f64,
    kind: CandidateKind,
}

struct Grower<'a> {
    ds: &'a Dataset,
    columns: &'a [usize],
    params: &'a TreeParams,
}

impl Grower<'_> {
    fn grow(&self, split: Vec<Obs>, est: Vec<Obs>, depth: usize, path: Vec<SplitRule>) -> Node {
        if depth < self.params.max_depth {
            if let Some(best) = self.best_split(&split, &est) {
                if best.gain > self.params.min_split_gain {
                    let (left_rule, right_rule) = self.rules_for(&best);
                    let n = split.len();
                    let (split_l, split_r): (Vec<Obs>, Vec<Obs>) =
                        split.into_iter().partition(|o| left_rule.holds(self.ds.value(o.row, best.column)));
                    let (est_l, est_r): (Vec<Obs>, Vec<Obs>) =
                        est.into_iter().partition(|o| left_rule.holds(self.ds.value(o.row, best.column)));
                    let mut path_l = path.clone();
                    path_l.push(left_rule.clone());
                    let mut path_r = path;
                    path_r.push(right_rule.clone());
                    return Node::Split {
                        gain: best.gain,
                        n,
                        left: Box::new(self.grow(split_l, est_l, depth + 1, path_l)),
                        right: Box::new(self.grow(split_r, est_r, depth + 1, path_r)),
                        left_rule,
                        right_rule,
                    };
                }
            }
        }
        let stats = ArmStats::of(&est);
        Node::Leaf(Leaf {
            id: 0,
            path,
            cate: stats.tau(),
            n_treated: stats.n_t,
            n_control: stats.n_c,
        })
    }

    fn rules_for(&self, cand: &Candidate) -> (SplitRule, SplitRule) {
        let meta = &self.ds.meta()[cand.column];
        match cand.kind {
            CandidateKind::Threshold(threshold) => (
                SplitRule { covariate: meta.name.clone(), comparison: Comparison::LessEq { threshold } },
                SplitRule { covariate: meta.name.clone(), comparison: Comparison::Greater { threshold } },
            ),
            CandidateKind::Level(code) if meta.levels.len() == 2 => {
                (SplitRule::equals(meta, code), SplitRule::equals(meta, 1 - code))
            }
            CandidateKind::Level(code) => (
                SplitRule::equals(meta, code),
                SplitRule {
                    covariate: meta.name.clone(),
                    comparison: Comparison::NotEquals { level: meta.levels[code].clone(), code },
                },
            ),
        }
    }

    fn valid(&self, left: &ArmStats, right: &ArmStats) -> bool {
        let m = self.params.min_leaf_per_arm;
        left.n_t >= m && left.n_c >= m && right.n_t >= m && right.n_c >= m
    }

    /// Highest-gain admissible split; ties keep the earliest covariate, then the smallest threshold or level.
    fn best_split(&self, split: &[Obs], est: &[Obs]) -> Option<Candidate> {
        let parent = ArmStats::of(split);
        let est_parent = ArmStats::of(est);
        let parent_score = parent.score();
        let mut best: Option<Candidate> = None;
        let mut consider = |column: usize, gain: f64, kind: CandidateKind| {
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate { column, gain, kind });
            }
        };
        for &column in self.columns {
            let meta = &self.ds.meta()[column];
            match meta.kind {
                CovariateKind::Continuous => {
                    let mut sorted: Vec<(f64, Obs)> =
                        split.iter().map(|o| (self.ds.value(o.row, column), *o)).collect();
                    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
                    let mut est_t: Vec<f64> =
                        est.iter().filter(|o| o.treated).map(|o| self.ds.value(o.row, column)).collect();
                    let mut est_c: Vec<f64> =
                        est.iter().filter(|o| !o.treated).map(|o| self.ds.value(o.row, column)).collect();
                    est_t.sort_by(f64::total_cmp);
                    est_c.sort_by(f64::total_cmp);
                    let mut left = ArmStats::default();
                    for i in 0..sorted.len().saturating_sub(1) {
                        left.add(&sorted[i].1);
                        let (a, b) = (sorted[i].0, sorted[i + 1].0);
                        if a == b {
                            continue;
                        }
                        let mut threshold = a + (b - a) / 2.0;
                        if threshold >= b {
                            threshold = a;
                        }
                        let right = parent.minus(&left);
                        if !self.valid(&left, &right) {
                            continue;
                        }
                        let est_left = ArmStats {
                            n_t: est_t.partition_point(|&v| v <= threshold),
                            n_c: est_c.partition_point(|&v| v <= threshold),
                            ..Default::default()
                        };
                        let est_right = ArmStats {
                            n_t: est_parent.n_t - est_left.n_t,
                            n_c: est_parent.n_c - est_left.n_c,
                            ..Default::default()
                        };
                        if !self.valid(&est_left, &est_right) {
                            continue;
                        }
                        let gain = left.score() + right.score() - parent_score;
                        consider(column, gain, CandidateKind::Threshold(threshold));
                    }
                }
                CovariateKind::Binary | CovariateKind::Categorical => {
                    let k = meta.levels.len();
                    let mut per_level = vec![ArmStats::default(); k];
                    let mut est_level = vec![ArmStats::default(); k];
                    for o in split {
                        per_level[self.ds.value(o.row, column) as usize].add(o);
                    }
                    for o in est {
                        est_level[self.ds.value(o.row, column) as usize].add(o);
                    }
                    // Two levels give one distinct partition; test it once.
                    let codes = if k == 2 { 1 } else { k };
                    for (code, left) in per_level.iter().enumerate().take(codes) {
                        let right = parent.minus(left);
                        if !self.valid(left, &right) {
                            continue;
                        }
                        let est_right = est_parent.minus(&est_level[code]);
                        if !self.valid(&est_level[code], &est_right) {
                            continue;
                        }
                        let gain = left.score() + right.score() - parent_score;
                        consider(column, gain, CandidateKind::Level(code));
                    }
                }
            }
        }
        best
    }
}

/// One leaf rendered as a symbolic conjunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafRule {
    pub leaf_id: usize,
    pub conjunction: Vec<SplitRule>,
    /// `HTN == 1 AND AGE <= 60.5`, or `(entire population)` for a root leaf.
    pub text: String,
    /// Same conjunction with covariate descriptions substituted.
    pub described: String,
    pub cate: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

impl fmt::Display for LeafRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} → τ={:.4}", self.text, self.cate)
    }
}

pub const ENTIRE_POPULATION: &str = "(entire population)";

pub fn extract_rules(p: &Partition, meta: &[CovariateMeta]) -> Vec<LeafRule> {
    p.leaves
        .iter()
        .map(|leaf| {
            let join = |parts: Vec<String>| {
                if parts.is_empty() {
                    ENTIRE_POPULATION.to_string()
                } else {
                    parts.join(" AND ")
                }
            };
            LeafRule {
                leaf_id: leaf.id,
                conjunction: leaf.path.clone(),
                text: join(leaf.path.iter().map(|r| r.to_string()).collect()),
                described: join(leaf.path.iter().map(|r| r.describe(meta)).collect()),
                cate: leaf.cate,
                n_treated: leaf.n_treated,
                n_control: leaf.n_control,
            }
        })
        .collect()
}
