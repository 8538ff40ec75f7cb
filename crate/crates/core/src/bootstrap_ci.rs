//! Bagged causal-tree ensembles, percentile intervals and width-based stability filtering.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal_tree::{fit_tree, Tree, TreeError, TreeParams};
use crate::dataset::{Dataset, RowId};
use crate::rng::{rng_from, sub_seed};

pub const DEFAULT_B: usize = 64;
pub const DEFAULT_ALPHA: f64 = 0.05;
const MAX_REDRAWS: u64 = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BootstrapError {
    #[error("empty input")]
    Empty,
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("alpha {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("bag {bag} could not be fitted after {attempts} redraws: {source}")]
    Unfittable {
        bag: usize,
        attempts: u64,
        #[source]
        source: TreeError,
    },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub b: usize,
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { b: DEFAULT_B, alpha: DEFAULT_ALPHA }
    }
}

/// Draws `b` with-replacement resamples of `ids`, each of size `|ids|`.
///
/// Replicate `r` is drawn from `sub_seed(seed, r)`, so any replicate can be
/// regenerated on its own.
pub fn bag(ids: &[RowId], b: usize, seed: u64) -> Vec<Vec<RowId>> {
    (0..b).map(|r| draw(ids, sub_seed(seed, r as u64))).collect()
}

fn draw(ids: &[RowId], seed: u64) -> Vec<RowId> {
    if ids.is_empty() {
        return Vec::new();
    }
    let mut rng = rng_from(seed);
    (0..ids.len()).map(|_| ids[rng.random_range(0..ids.len())]).collect()
}

/// Seed of tree `index` in an ensemble with master seed `master`.
pub fn tree_seed(master: u64, index: usize) -> u64 {
    sub_seed(master, index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEnsemble {
    pub trees: Vec<Tree>,
    pub b: usize,
    pub seed: u64,
}

/// Fits one tree per bag in parallel; results are identical to [`fit_ensemble_sequential`].
///
/// A bag failing the fit precondition is redrawn from `pool` up to five times.
pub fn fit_ensemble(
    ds: &Dataset,
    pool: &[RowId],
    bags: &[Vec<RowId>],
    covariates: &[String],
    params: &TreeParams,
) -> Result<BootstrapEnsemble, BootstrapError> {
    let trees = bags
        .par_iter()
        .enumerate()
        .map(|(i, bag)| fit_member(ds, pool, i, bag, covariates, params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BootstrapEnsemble { b: trees.len(), trees, seed: params.seed })
}

pub fn fit_ensemble_sequential(
    ds: &Dataset,
    pool: &[RowId],
    bags: &[Vec<RowId>],
    covariates: &[String],
    params: &TreeParams,
) -> Result<BootstrapEnsemble, BootstrapError> {
    let trees = bags
        .iter()
        .enumerate()
        .map(|(i, bag)| fit_member(ds, pool, i, bag, covariates, params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BootstrapEnsemble { b: trees.len(), trees, seed: params.seed })
}

fn fit_member(
    ds: &Dataset,
    pool: &[RowId],
    index: usize,
    bag: &[RowId],
    covariates: &[String],
    params: &TreeParams,
) -> Result<Tree, BootstrapError> {
    let seed = tree_seed(params.seed, index);
    let member = params.with_seed(seed);
    match fit_tree(ds, bag, covariates, &member) {
        Ok(tree) => Ok(tree),
        Err(TreeError::ArmTooSmall { .. }) => {
            let mut last = None;
            for attempt in 1..=MAX_REDRAWS {
                let redraw = draw(pool, sub_seed(seed, attempt));
                match fit_tree(ds, &redraw, covariates, &member) {
                    Ok(tree) => return Ok(tree),
                    Err(e @ TreeError::ArmTooSmall { .. }) => last = Some(e),
                    Err(e) => return Err(e.into()),
                }
            }
            Err(BootstrapError::Unfittable {
                bag: index,
                attempts: MAX_REDRAWS,
                source: last.expect("at least one redraw"),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Linear-interpolation quantile at 1-based rank `h = (n − 1)·p + 1`.
pub fn quantile(values: &[f64], p: f64) -> Result<f64, BootstrapError> {
    if values.is_empty() {
        return Err(BootstrapError::Empty);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(BootstrapError::InvalidProbability(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, p))
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CIRecord {
    pub sample_id: String,
    #[serde(skip)]
    pub row: RowId,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub width: f64,
}

/// Summarises B per-tree predictions as mean point and percentile bounds.
pub fn summarize(sample_id: &str, row: RowId, predictions: &[f64], alpha: f64) -> Result<CIRecord, BootstrapError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BootstrapError::InvalidAlpha(alpha));
    }
    if predictions.is_empty() {
        return Err(BootstrapError::Empty);
    }
    let mut sorted = predictions.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lower = quantile_sorted(&sorted, alpha / 2.0);
    let upper = quantile_sorted(&sorted, 1.0 - alpha / 2.0);
    let point = predictions.iter().sum::<f64>() / predictions.len() as f64;
    Ok(CIRecord { sample_id: sample_id.to_string(), row, point, lower, upper, width: upper - lower })
}

/// Per-sample percentile intervals over the ensemble's leaf predictions.
pub fn predict_ci(ens: &BootstrapEnsemble, ds: &Dataset, test: &[RowId], alpha: f64) -> Result<Vec<CIRecord>, BootstrapError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BootstrapError::InvalidAlpha(alpha));
    }
    test.par_iter()
        .map(|&row| {
            let predictions = ens
                .trees
                .iter()
                .map(|t| t.leaf_for_row(ds, row).map(|l| l.cate))
                .collect::<Result<Vec<f64>, _>>()?;
            summarize(&ds.sample(row).id, row, &predictions, alpha)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub records: Vec<CIRecord>,
    pub threshold: f64,
    pub mean_width: f64,
    pub unstable_ids: Vec<String>,
    pub stable_ids: Vec<String>,
}

impl StabilityReport {
    pub fn unstable_rows(&self) -> Vec<RowId> {
        self.records.iter().filter(|r| r.width > self.threshold).map(|r| r.row).collect()
    }

    pub fn stable_rows(&self) -> Vec<RowId> {
        self.records.iter().filter(|r| r.width <= self.threshold).map(|r| r.row).collect()
    }
}

/// Threshold = mean width; samples strictly above it are unstable.
pub fn stability_filter(records: Vec<CIRecord>) -> Result<StabilityReport, BootstrapError> {
    if records.is_empty() {
        return Err(BootstrapError::Empty);
    }
    let mean = records.iter().map(|r| r.width).sum::<f64>() / records.len() as f64;
    let (min, max) = records
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.width), hi.max(r.width)));
    // Rounding can push the mean of identical widths below them.
    let threshold = mean.clamp(min, max);
    let (unstable_ids, stable_ids) = records.iter().fold((Vec::new(), Vec::new()), |(mut u, mut s), r| {
        if r.width > threshold {
            u.push(r.sample_id.clone());
        } else {
            s.push(r.sample_id.clone());
        }
        (u, s)
    });
    Ok(StabilityReport { records, threshold, mean_width: mean, unstable_ids, stable_ids })
}
