//! Synthetic observational cohorts with known confounding and ground-truth effects.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CovariateMeta, Dataset, DatasetError, RowId, Sample};
use crate::orchestrator::{predict_final, FinalModel};
use crate::rng::{rng_from, sub_seed};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("degenerate draw: {0}; try a different seed")]
    Degenerate(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDist {
    Binary { prevalence: f64 },
    Continuous { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCovariate {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(flatten)]
    pub dist: CovariateDist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSpec {
    pub name: String,
    pub treatment_log_odds_shift: f64,
    pub outcome_shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionOp {
    Eq,
    Le,
    Gt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub covariate: String,
    pub op: ConditionOp,
    pub value: f64,
}

impl Condition {
    fn holds(&self, v: f64) -> bool {
        match self.op {
            ConditionOp::Eq => v == self.value,
            ConditionOp::Le => v <= self.value,
            ConditionOp::Gt => v > self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPiece {
    /// All conditions must hold.
    pub when: Vec<Condition>,
    pub tau: f64,
}

/// Piecewise-constant τ(x): the first matching piece, else `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectFn {
    pub base: f64,
    #[serde(default)]
    pub pieces: Vec<EffectPiece>,
}

impl EffectFn {
    pub fn constant(tau: f64) -> Self {
        Self { base: tau, pieces: Vec::new() }
    }

    pub fn eval(&self, names: &[String], x: &[f64]) -> f64 {
        let value = |name: &str| names.iter().position(|n| n == name).map(|i| x[i]);
        self.pieces
            .iter()
            .find(|p| p.when.iter().all(|c| value(&c.covariate).is_some_and(|v| c.holds(v))))
            .map_or(self.base, |p| p.tau)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub covariates: Vec<SynthCovariate>,
    #[serde(default)]
    pub confounders: Vec<ConfounderSpec>,
    pub effect: EffectFn,
    pub noise_sd: f64,
    pub base_rate_treated: f64,
    pub seed: u64,
}

/// Comorbidity flags used by the default cohorts.
pub const COMORBIDITIES: [(&str, &str); 9] = [
    ("HTN", "hypertension"),
    ("DM", "diabetes mellitus"),
    ("CHF", "congestive heart failure"),
    ("AF", "atrial fibrillation"),
    ("CAD", "coronary artery disease"),
    ("CVAD", "cerebrovascular disease"),
    ("CKD", "chronic kidney disease"),
    ("COPDA", "chronic obstructive pulmonary disease or asthma"),
    ("GOUT", "gout"),
];

impl SynthConfig {
    /// The comorbidity vocabulary at one prevalence, no confounding, τ ≡ `tau`.
    pub fn comorbidity(n: usize, prevalence: f64, tau: f64, seed: u64) -> Self {
        Self {
            n,
            covariates: COMORBIDITIES
                .iter()
                .map(|(name, description)| SynthCovariate {
                    name: name.to_string(),
                    description: description.to_string(),
                    dist: CovariateDist::Binary { prevalence },
                })
                .collect(),
            confounders: Vec::new(),
            effect: EffectFn::constant(tau),
            noise_sd: 1.0,
            base_rate_treated: 0.5,
            seed,
        }
    }

    /// One binary confounder, τ ≡ 0: every naive contrast is pure confounding bias.
    pub fn one_confounder(n: usize, treatment_log_odds_shift: f64, outcome_shift: f64, seed: u64) -> Self {
        let mut cfg = Self::comorbidity(n, 0.3, 0.0, seed);
        cfg.covariates.truncate(4);
        cfg.covariates[0].dist = CovariateDist::Binary { prevalence: 0.5 };
        cfg.confounders = vec![ConfounderSpec { name: "HTN".into(), treatment_log_odds_shift, outcome_shift }];
        cfg.noise_sd = 0.5;
        cfg.base_rate_treated = 0.3;
        cfg
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n == 0 {
            return bad("n: must be at least 1".into());
        }
        if self.covariates.is_empty() {
            return bad("covariates: at least one covariate is required".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd: must be finite and non-negative, got {}", self.noise_sd));
        }
        if !(self.base_rate_treated > 0.0 && self.base_rate_treated < 1.0) {
            return bad(format!("base_rate_treated: must lie in (0, 1), got {}", self.base_rate_treated));
        }
        for c in &self.covariates {
            match c.dist {
                CovariateDist::Binary { prevalence } if !(0.0..=1.0).contains(&prevalence) => {
                    return bad(format!("covariates.{}.prevalence: must lie in [0, 1], got {prevalence}", c.name));
                }
                CovariateDist::Continuous { sd, .. } if !(sd >= 0.0) => {
                    return bad(format!("covariates.{}.sd: must be non-negative, got {sd}", c.name));
                }
                _ => {}
            }
            if self.covariates.iter().filter(|o| o.name == c.name).count() > 1 {
                return bad(format!("covariates.{}: duplicate name", c.name));
            }
        }
        for conf in &self.confounders {
            match self.covariates.iter().find(|c| c.name == conf.name) {
                None => return bad(format!("confounders.{}: not a covariate", conf.name)),
                Some(c) if !matches!(c.dist, CovariateDist::Binary { .. }) => {
                    return bad(format!("confounders.{}: confounders must be binary", conf.name));
                }
                _ => {}
            }
        }
        for piece in &self.effect.pieces {
            for cond in &piece.when {
                if !self.covariates.iter().any(|c| c.name == cond.covariate) {
                    return bad(format!("effect.when.{}: not a covariate", cond.covariate));
                }
            }
        }
        Ok(())
    }

    fn meta(&self) -> Vec<CovariateMeta> {
        self.covariates
            .iter()
            .map(|c| match c.dist {
                CovariateDist::Binary { .. } => CovariateMeta::binary(&c.name, &c.description),
                CovariateDist::Continuous { .. } => CovariateMeta::continuous(&c.name, &c.description),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub id: String,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfounderBias {
    pub treatment_log_odds_shift: f64,
    pub outcome_shift: f64,
    /// Prevalence among treated minus among controls, on this draw.
    pub prevalence_gap: f64,
    /// `outcome_shift × prevalence_gap`: this confounder's share of the naive contrast.
    pub naive_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub samples: Vec<TruthRow>,
    pub ate: f64,
    pub biases: BTreeMap<String, ConfounderBias>,
}

impl GroundTruth {
    pub fn tau(&self, row: RowId) -> f64 {
        self.samples[row].tau
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Draws a cohort. Covariates, treatment and noise use separate seeded streams.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth), SynthError> {
    cfg.validate()?;
    let names: Vec<String> = cfg.covariates.iter().map(|c| c.name.clone()).collect();
    let mut cov_rng = rng_from(sub_seed(cfg.seed, 1));
    let mut treat_rng = rng_from(sub_seed(cfg.seed, 2));
    let mut noise_rng = rng_from(sub_seed(cfg.seed, 3));
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| SynthError::Config(format!("noise_sd: {e}")))?;
    let confounders: Vec<(usize, &ConfounderSpec)> =
        cfg.confounders.iter().map(|c| (names.iter().position(|n| n == &c.name).expect("validated"), c)).collect();
    let width = cfg.n.to_string().len();
    let base = logit(cfg.base_rate_treated);

    let mut samples = Vec::with_capacity(cfg.n);
    let mut truth = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let x: Vec<f64> = cfg
            .covariates
            .iter()
            .map(|c| match c.dist {
                CovariateDist::Binary { prevalence } => f64::from(u8::from(cov_rng.random::<f64>() < prevalence)),
                CovariateDist::Continuous { mean, sd } => {
                    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut cov_rng);
                    mean + sd * z
                }
            })
            .collect();
        let log_odds = base + confounders.iter().map(|(j, c)| x[*j] * c.treatment_log_odds_shift).sum::<f64>();
        let w = u8::from(treat_rng.random::<f64>() < sigmoid(log_odds));
        let tau = cfg.effect.eval(&names, &x);
        let shift: f64 = confounders.iter().map(|(j, c)| x[*j] * c.outcome_shift).sum();
        let y = shift + f64::from(w) * tau + noise.sample(&mut noise_rng);
        let id = format!("s{i:0width$}");
        truth.push(TruthRow { id: id.clone(), tau });
        samples.push(Sample { id, outcome: y, treatment: w, covariates: x });
    }
    let treated = samples.iter().filter(|s| s.treatment == 1).count();
    if treated == 0 || treated == cfg.n {
        return Err(SynthError::Degenerate(format!("{treated} of {} samples treated", cfg.n)));
    }
    let biases = confounders
        .iter()
        .map(|(j, c)| {
            let prevalence = |arm: u8| {
                let (hits, n) = samples
                    .iter()
                    .filter(|s| s.treatment == arm)
                    .fold((0.0, 0usize), |(h, n), s| (h + s.covariates[*j], n + 1));
                hits / n as f64
            };
            let gap = prevalence(1) - prevalence(0);
            (
                c.name.clone(),
                ConfounderBias {
                    treatment_log_odds_shift: c.treatment_log_odds_shift,
                    outcome_shift: c.outcome_shift,
                    prevalence_gap: gap,
                    naive_bias: c.outcome_shift * gap,
                },
            )
        })
        .collect();
    let ate = truth.iter().map(|t| t.tau).sum::<f64>() / cfg.n as f64;
    let ds = Dataset::new(cfg.meta(), samples)?;
    Ok((ds, GroundTruth { samples: truth, ate, biases }))
}

/// Writes `data.csv`, `meta.json` and `truth.json` into `dir`.
pub fn write_cohort(dir: &Path, ds: &Dataset, truth: &GroundTruth) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| SynthError::Io(dir.display().to_string(), e))?;
    ds.write(&dir.join("data.csv"), &dir.join("meta.json"))?;
    let path = dir.join("truth.json");
    let mut text = serde_json::to_string_pretty(truth).map_err(|e| SynthError::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| SynthError::Io(path.display().to_string(), e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pehe: f64,
    pub ate_error: f64,
}

/// PEHE and ATE error of the backward-trace predictions over `rows`.
pub fn evaluate_model(model: &FinalModel, ds: &Dataset, truth: &GroundTruth, rows: &[RowId]) -> Evaluation {
    evaluate_predictions(rows, truth, |row| predict_final(model, &ds.covariate_map(row)).map(|p| p.cate).unwrap_or(f64::NAN))
}

pub fn evaluate_predictions(rows: &[RowId], truth: &GroundTruth, predict: impl Fn(RowId) -> f64) -> Evaluation {
    if rows.is_empty() {
        return Evaluation { pehe: 0.0, ate_error: 0.0 };
    }
    let (sq, sum) = rows.iter().fold((0.0, 0.0), |(sq, sum), &r| {
        let p = predict(r);
        (sq + (p - truth.tau(r)).powi(2), sum + p)
    });
    let n = rows.len() as f64;
    Evaluation { pehe: (sq / n).sqrt(), ate_error: (sum / n - truth.ate).abs() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diff_in_means(ds: &Dataset, rows: impl Iterator<Item = RowId> + Clone) -> f64 {
        let arm = |w: u8| {
            let ys: Vec<f64> = rows.clone().map(|r| ds.sample(r)).filter(|s| s.treatment == w).map(|s| s.outcome).collect();
            ys.iter().sum::<f64>() / ys.len() as f64
        };
        arm(1) - arm(0)
    }

    #[test]
    fn unconfounded_naive_ate_is_near_truth() {
        let (ds, truth) = generate(&SynthConfig::comorbidity(5000, 0.3, 1.0, 7)).unwrap();
        assert_eq!(truth.ate, 1.0);
        let naive = diff_in_means(&ds, 0..ds.len());
        assert!((0.9..=1.1).contains(&naive), "naive {naive}");
    }

    #[test]
    fn confounding_biases_naive_but_not_within_strata() {
        let (ds, truth) = generate(&SynthConfig::one_confounder(5000, 1.5, 2.0, 11)).unwrap();
        let naive = diff_in_means(&ds, 0..ds.len());
        // Brute force over the draw: the contrast is 2 × the prevalence gap plus noise.
        let bias = truth.biases["HTN"].naive_bias;
        assert!(bias > 0.5, "bias {bias}");
        assert!((naive - bias).abs() < 0.1, "naive {naive} vs {bias}");
        for level in [0.0, 1.0] {
            let within = diff_in_means(&ds, (0..ds.len()).filter(|&r| ds.sample(r).covariates[0] == level));
            assert!(within.abs() <= 0.1, "stratum {level}: {within}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig::one_confounder(500, 1.5, 2.0, 3);
        let (a, ta) = generate(&cfg).unwrap();
        let (b, tb) = generate(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&SynthConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
        let recomputed = ta.samples.iter().map(|t| t.tau).sum::<f64>() / ta.samples.len() as f64;
        assert_eq!(recomputed, ta.ate);
    }

    #[test]
    fn noiseless_piecewise_effect_is_exact() {
        let mut cfg = SynthConfig::comorbidity(400, 0.5, 0.0, 5);
        cfg.noise_sd = 0.0;
        cfg.effect = EffectFn {
            base: 0.0,
            pieces: vec![EffectPiece { when: vec![Condition { covariate: "DM".into(), op: ConditionOp::Eq, value: 1.0 }], tau: 2.0 }],
        };
        let (ds, truth) = generate(&cfg).unwrap();
        for level in [0.0, 1.0] {
            let contrast = diff_in_means(&ds, (0..ds.len()).filter(|&r| ds.sample(r).covariates[1] == level));
            assert_eq!(contrast, 2.0 * level);
        }
        assert!(truth.samples.iter().all(|t| t.tau == 0.0 || t.tau == 2.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = SynthConfig::comorbidity(0, 0.3, 1.0, 1);
        assert!(generate(&cfg).unwrap_err().to_string().contains("n: must be at least 1"));
        cfg.n = 10;
        cfg.base_rate_treated = 1.0;
        assert!(matches!(generate(&cfg), Err(SynthError::Config(_))));
        cfg.base_rate_treated = 0.5;
        cfg.confounders.push(ConfounderSpec { name: "NOPE".into(), treatment_log_odds_shift: 1.0, outcome_shift: 1.0 });
        assert!(matches!(generate(&cfg), Err(SynthError::Config(_))));
    }

    #[test]
    fn degenerate_draw_is_reported() {
        let mut cfg = SynthConfig::comorbidity(3, 0.3, 1.0, 1);
        cfg.base_rate_treated = 1e-9;
        assert!(matches!(generate(&cfg), Err(SynthError::Degenerate(_))));
    }

    #[test]
    fn evaluation_arithmetic() {
        let (_, truth) = generate(&SynthConfig::comorbidity(50, 0.3, 1.0, 2)).unwrap();
        let rows: Vec<RowId> = (0..50).collect();
        assert_eq!(evaluate_predictions(&rows, &truth, |_| 0.0), Evaluation { pehe: 1.0, ate_error: 1.0 });
        assert_eq!(evaluate_predictions(&rows, &truth, |r| truth.tau(r)), Evaluation { pehe: 0.0, ate_error: 0.0 });
    }
}
