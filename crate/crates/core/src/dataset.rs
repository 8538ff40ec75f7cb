//! Observational datasets: loading, validation, splitting and restriction.
//!
//! Covariate values are stored as `f64`. Binary and categorical covariates
//! hold the index of their level in [`CovariateMeta::levels`], so a binary
//! flag with levels `["0", "1"]` stores `0.0` / `1.0`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::rng::{rng_from, stream, sub_seed};

/// Row index into a [`Dataset`]; stable for the lifetime of the dataset.
pub type RowId = usize;

/// Covariate values keyed by name. Binary/categorical values are level codes.
pub type CovariateMap = BTreeMap<String, f64>;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("metadata error: {0}")]
    Metadata(String),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("unknown covariate {0}")]
    UnknownCovariate(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("duplicate id {id} on row {row}")]
    DuplicateId { id: String, row: usize },
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("unsupported restriction on continuous covariate {0}")]
    UnsupportedRestriction(String),
    #[error("invalid restriction context: {0}")]
    InvalidContext(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Binary,
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateMeta {
    pub name: String,
    /// Free text used verbatim in agent prompts.
    pub description: String,
    pub kind: CovariateKind,
    #[serde(default)]
    pub levels: Vec<String>,
}

impl CovariateMeta {
    pub fn binary(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            kind: CovariateKind::Binary,
            levels: vec!["0".to_string(), "1".to_string()],
        }
    }

    pub fn continuous(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            kind: CovariateKind::Continuous,
            levels: Vec::new(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.kind != CovariateKind::Continuous
    }

    pub fn level_code(&self, level: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == level)
    }

    /// Renders a stored value: the level string for discrete kinds.
    pub fn render_value(&self, value: f64) -> String {
        if self.is_discrete() {
            self.levels
                .get(value as usize)
                .cloned()
                .unwrap_or_else(|| format!("<{value}>"))
        } else {
            format!("{value}")
        }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.name.trim().is_empty() {
            return Err(DatasetError::Metadata("covariate with empty name".into()));
        }
        if matches!(self.name.as_str(), "id" | "y" | "w") {
            return Err(DatasetError::Metadata(format!(
                "covariate name {} collides with a reserved column",
                self.name
            )));
        }
        match self.kind {
            CovariateKind::Binary if self.levels.len() != 2 => Err(DatasetError::Metadata(format!(
                "binary covariate {} must have exactly two levels, got {}",
                self.name,
                self.levels.len()
            ))),
            CovariateKind::Categorical if self.levels.is_empty() => Err(DatasetError::Metadata(
                format!("categorical covariate {} has no levels", self.name),
            )),
            CovariateKind::Continuous if !self.levels.is_empty() => Err(DatasetError::Metadata(
                format!("continuous covariate {} must not list levels", self.name),
            )),
            _ => {
                let unique: BTreeSet<&String> = self.levels.iter().collect();
                if unique.len() != self.levels.len() {
                    return Err(DatasetError::Metadata(format!(
                        "covariate {} has duplicate levels",
                        self.name
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub outcome: f64,
    pub treatment: u8,
    /// Aligned with the dataset's covariate metadata order.
    pub covariates: Vec<f64>,
}

impl Sample {
    pub fn is_treated(&self) -> bool {
        self.treatment == 1
    }
}

/// Validated, immutable collection of samples with their covariate schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    meta: Vec<CovariateMeta>,
    samples: Vec<Sample>,
    column: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, checking every invariant of the schema and samples.
    pub fn new(meta: Vec<CovariateMeta>, samples: Vec<Sample>) -> Result<Self, DatasetError> {
        let mut column = HashMap::new();
        for (i, m) in meta.iter().enumerate() {
            m.validate()?;
            if column.insert(m.name.clone(), i).is_some() {
                return Err(DatasetError::Metadata(format!(
                    "duplicate covariate name {}",
                    m.name
                )));
            }
        }
        let mut ids = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            let row = i + 1;
            if ids.insert(s.id.clone(), row).is_some() {
                return Err(DatasetError::DuplicateId { id: s.id.clone(), row });
            }
            if s.treatment > 1 {
                return Err(DatasetError::Row {
                    row,
                    message: format!("treatment must be 0 or 1, got {}", s.treatment),
                });
            }
            if !s.outcome.is_finite() {
                return Err(DatasetError::Row { row, message: "non-finite outcome".into() });
            }
            if s.covariates.len() != meta.len() {
                return Err(DatasetError::Row {
                    row,
                    message: format!(
                        "expected {} covariate values, got {}",
                        meta.len(),
                        s.covariates.len()
                    ),
                });
            }
            for (m, &v) in meta.iter().zip(&s.covariates) {
                let ok = if m.is_discrete() {
                    v.fract() == 0.0 && v >= 0.0 && (v as usize) < m.levels.len()
                } else {
                    v.is_finite()
                };
                if !ok {
                    return Err(DatasetError::Row {
                        row,
                        message: format!("value {v} invalid for covariate {}", m.name),
                    });
                }
            }
        }
        Ok(Self { meta, samples, column })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn meta(&self) -> &[CovariateMeta] {
        &self.meta
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, row: RowId) -> &Sample {
        &self.samples[row]
    }

    pub fn covariate_names(&self) -> Vec<String> {
        self.meta.iter().map(|m| m.name.clone()).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column.get(name).copied()
    }

    pub fn covariate(&self, name: &str) -> Option<&CovariateMeta> {
        self.column_index(name).map(|i| &self.meta[i])
    }

    pub fn value(&self, row: RowId, column: usize) -> f64 {
        self.samples[row].covariates[column]
    }

    pub fn covariate_map(&self, row: RowId) -> CovariateMap {
        self.meta
            .iter()
            .zip(&self.samples[row].covariates)
            .map(|(m, &v)| (m.name.clone(), v))
            .collect()
    }

    pub fn all_rows(&self) -> Vec<RowId> {
        (0..self.samples.len()).collect()
    }

    /// Writes the data CSV and metadata JSON in the formats `load_dataset` reads.
    pub fn write(&self, data_path: &Path, meta_path: &Path) -> Result<(), DatasetError> {
        let mut writer = csv::Writer::from_path(data_path)?;
        let mut header = vec!["id".to_string(), "y".to_string(), "w".to_string()];
        header.extend(self.meta.iter().map(|m| m.name.clone()));
        writer.write_record(&header)?;
        for s in &self.samples {
            let mut record = vec![s.id.clone(), format!("{}", s.outcome), s.treatment.to_string()];
            record.extend(self.meta.iter().zip(&s.covariates).map(|(m, &v)| m.render_value(v)));
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|source| DatasetError::Io {
            path: data_path.display().to_string(),
            source,
        })?;
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| DatasetError::Metadata(e.to_string()))?;
        std::fs::write(meta_path, json + "\n").map_err(|source| DatasetError::Io {
            path: meta_path.display().to_string(),
            source,
        })
    }
}

pub fn load_metadata(meta_path: &Path) -> Result<Vec<CovariateMeta>, DatasetError> {
    let text = std::fs::read_to_string(meta_path).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Metadata(e.to_string()))
}

/// Loads a data CSV (`id,y,w,<covariates...>`) validated against a metadata file.
pub fn load_dataset(data_path: &Path, meta_path: &Path) -> Result<Dataset, DatasetError> {
    let meta = load_metadata(meta_path)?;
    let file = std::fs::File::open(data_path).map_err(|source| DatasetError::Io {
        path: data_path.display().to_string(),
        source,
    })?;
    parse_csv(file, meta)
}

pub fn parse_csv<R: std::io::Read>(reader: R, meta: Vec<CovariateMeta>) -> Result<Dataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| headers.iter().position(|h| h == name);
    let id_col = position("id").ok_or_else(|| DatasetError::MissingColumn("id".into()))?;
    let y_col = position("y").ok_or_else(|| DatasetError::MissingColumn("y".into()))?;
    let w_col = position("w").ok_or_else(|| DatasetError::MissingColumn("w".into()))?;
    for h in headers.iter() {
        if !matches!(h, "id" | "y" | "w") && !meta.iter().any(|m| m.name == h) {
            return Err(DatasetError::UnknownCovariate(h.to_string()));
        }
    }
    let cov_cols = meta
        .iter()
        .map(|m| position(&m.name).ok_or_else(|| DatasetError::MissingColumn(m.name.clone())))
        .collect::<Result<Vec<_>, _>>()?;

    let mut samples = Vec::new();
    let mut seen = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let id = field(id_col).to_string();
        if id.is_empty() {
            return Err(DatasetError::Row { row, message: "empty id".into() });
        }
        if seen.insert(id.clone(), row).is_some() {
            return Err(DatasetError::DuplicateId { id, row });
        }
        let outcome: f64 = field(y_col).parse().map_err(|_| DatasetError::Row {
            row,
            message: format!("outcome y={:?} is not a number", field(y_col)),
        })?;
        let treatment = match field(w_col) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(DatasetError::Row {
                    row,
                    message: format!("treatment w must be 0 or 1, got {other:?}"),
                })
            }
        };
        let mut covariates = Vec::with_capacity(meta.len());
        for (m, &c) in meta.iter().zip(&cov_cols) {
            let raw = field(c);
            let value = if m.is_discrete() {
                m.level_code(raw).ok_or_else(|| DatasetError::Row {
                    row,
                    message: format!("value {raw:?} is not a level of {} {:?}", m.name, m.levels),
                })? as f64
            } else {
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DatasetError::Row {
                        row,
                        message: format!("value {raw:?} for {} is not a finite number", m.name),
                    })?
            };
            covariates.push(value);
        }
        samples.push(Sample { id, outcome, treatment, covariates });
    }
    Dataset::new(meta, samples)
}

/// Train / estimation / test partition of row ids, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<RowId>,
    pub estimation: Vec<RowId>,
    pub test: Vec<RowId>,
}

impl DataSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.estimation.len(), self.test.len())
    }
}

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.4, 0.4, 0.2];

/// Seeded shuffle, then floor-sized train and estimation blocks; the remainder is test.
pub fn split_dataset(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<DataSplit, DatasetError> {
    let n = ds.len();
    if n == 0 {
        return Err(DatasetError::InvalidSplit("dataset is empty".into()));
    }
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(DatasetError::InvalidSplit(format!("ratios must be non-negative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DatasetError::InvalidSplit(format!("ratios sum to {total}, expected 1")));
    }
    let size = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_train = size(ratios[0]).min(n);
    let n_est = size(ratios[1]).min(n - n_train);
    let n_test = n - n_train - n_est;
    for (name, ratio, count) in [
        ("train", ratios[0], n_train),
        ("estimation", ratios[1], n_est),
        ("test", ratios[2], n_test),
    ] {
        if ratio > 0.0 && count == 0 {
            return Err(DatasetError::InvalidSplit(format!(
                "{name} split is empty with ratio {ratio} and n = {n}"
            )));
        }
    }
    let mut rows = ds.all_rows();
    rows.shuffle(&mut rng_from(sub_seed(seed, stream::SPLIT)));
    let mut train = rows[..n_train].to_vec();
    let mut estimation = rows[n_train..n_train + n_est].to_vec();
    let mut test = rows[n_train + n_est..].to_vec();
    train.sort_unstable();
    estimation.sort_unstable();
    test.sort_unstable();
    Ok(DataSplit { train, estimation, test })
}

/// Level strings of the restricting confounders, in context order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StratumKey(pub Vec<String>);

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "(all)");
        }
        write!(f, "{}", self.0.join("|"))
    }
}

/// Accumulated confounders, optionally bound to one stratum's levels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RestrictionContext {
    pub confounders: Vec<String>,
    #[serde(default)]
    pub stratum: BTreeMap<String, String>,
}

impl RestrictionContext {
    pub fn new(confounders: Vec<String>) -> Self {
        Self { confounders, stratum: BTreeMap::new() }
    }

    /// Binds this context to one stratum.
    pub fn bind(&self, key: &StratumKey) -> Self {
        Self {
            confounders: self.confounders.clone(),
            stratum: self.confounders.iter().cloned().zip(key.0.iter().cloned()).collect(),
        }
    }

    pub fn is_bound(&self) -> bool {
        !self.stratum.is_empty() || self.confounders.is_empty()
    }

    pub fn validate(&self, ds: &Dataset) -> Result<(), DatasetError> {
        let unique: BTreeSet<&String> = self.confounders.iter().collect();
        if unique.len() != self.confounders.len() {
            return Err(DatasetError::InvalidContext("duplicate confounder".into()));
        }
        for name in &self.confounders {
            let meta = ds
                .covariate(name)
                .ok_or_else(|| DatasetError::UnknownCovariate(name.clone()))?;
            if !meta.is_discrete() {
                return Err(DatasetError::UnsupportedRestriction(name.clone()));
            }
        }
        if !self.stratum.is_empty() {
            let keys: BTreeSet<&String> = self.stratum.keys().collect();
            if keys != unique {
                return Err(DatasetError::InvalidContext(
                    "stratum keys differ from the confounder list".into(),
                ));
            }
        }
        Ok(())
    }

    /// Whether `x` carries this context's stratum levels (rendered as level strings).
    pub fn admits(&self, ds_meta: &[CovariateMeta], x: &CovariateMap) -> Option<bool> {
        for (name, level) in &self.stratum {
            let meta = ds_meta.iter().find(|m| &m.name == name)?;
            let value = *x.get(name)?;
            if &meta.render_value(value) != level {
                return Some(false);
            }
        }
        Some(true)
    }
}

pub const DEFAULT_MIN_STRATUM_SIZE: usize = 30;

/// Partitions `ids` into strata of identical confounder levels.
///
/// Strata smaller than `min_stratum_size` are dropped with a warning.
pub fn apply_restriction(
    ids: &[RowId],
    ctx: &RestrictionContext,
    ds: &Dataset,
    min_stratum_size: usize,
) -> Result<BTreeMap<StratumKey, Vec<RowId>>, DatasetError> {
    ctx.validate(ds)?;
    let columns: Vec<usize> = ctx
        .confounders
        .iter()
        .map(|n| ds.column_index(n).expect("validated"))
        .collect();
    let mut strata: BTreeMap<StratumKey, Vec<RowId>> = BTreeMap::new();
    for &row in ids {
        let key = StratumKey(
            columns
                .iter()
                .map(|&c| ds.meta()[c].render_value(ds.value(row, c)))
                .collect(),
        );
        strata.entry(key).or_default().push(row);
    }
    strata.retain(|key, rows| {
        if rows.len() < min_stratum_size {
            warn!(stratum = %key, size = rows.len(), min_stratum_size, dropped = ?rows, "dropping small stratum");
            false
        } else {
            true
        }
    });
    Ok(strata)
}

/// Covariates not yet validated as confounders, in metadata order.
pub fn remaining_covariates(ds: &Dataset, validated: &BTreeSet<String>) -> Result<Vec<String>, DatasetError> {
    if let Some(unknown) = validated.iter().find(|n| ds.column_index(n).is_none()) {
        return Err(DatasetError::UnknownCovariate(unknown.clone()));
    }
    Ok(ds
        .meta()
        .iter()
        .filter(|m| !validated.contains(&m.name))
        .map(|m| m.name.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta2() -> Vec<CovariateMeta> {
        vec![CovariateMeta::binary("HTN", "hypertension"), CovariateMeta::binary("DM", "diabetes mellitus")]
    }

    fn fixture(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                id: format!("s{i}"),
                outcome: i as f64,
                treatment: (i % 2) as u8,
                covariates: vec![((i / 2) % 2) as f64, ((i / 4) % 2) as f64],
            })
            .collect();
        Dataset::new(meta2(), samples).unwrap()
    }

    #[test]
    fn parses_three_rows() {
        let csv = "id,y,w,HTN,DM\na,1.5,1,1,0\nb,0.2,0,0,0\nc,-3,1,1,1\n";
        let ds = parse_csv(csv.as_bytes(), meta2()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.meta().len(), 2);
        assert_eq!(ds.sample(2).covariates, vec![1.0, 1.0]);
        assert_eq!(ds.sample(0).id, "a");
    }

    #[test]
    fn bad_treatment_names_row() {
        let csv = "id,y,w,HTN,DM\na,1,1,1,0\nb,1,0,1,0\nc,1,0,1,0\nd,1,0,1,0\ne,1,2,1,0\n";
        let err = parse_csv(csv.as_bytes(), meta2()).unwrap_err();
        assert!(matches!(err, DatasetError::Row { row: 5, .. }), "{err}");
        assert!(err.to_string().contains("row 5"));
    }

    #[test]
    fn unknown_column_is_rejected() {
        let csv = "id,y,w,HTN,DM,AGE\na,1,1,1,0,50\n";
        let err = parse_csv(csv.as_bytes(), meta2()).unwrap_err();
        assert_eq!(err.to_string(), "unknown covariate AGE");
    }

    #[test]
    fn missing_column_and_bad_level_and_duplicates() {
        let err = parse_csv("id,y,w,HTN\na,1,1,1\n".as_bytes(), meta2()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingColumn(ref c) if c == "DM"));
        let err = parse_csv("id,y,w,HTN,DM\na,1,1,1,0\nb,1,1,3,0\n".as_bytes(), meta2()).unwrap_err();
        assert!(matches!(err, DatasetError::Row { row: 2, .. }));
        let err = parse_csv("id,y,w,HTN,DM\na,1,1,1,0\na,1,1,1,0\n".as_bytes(), meta2()).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateId { row: 2, .. }));
    }

    #[test]
    fn metadata_invariants() {
        let mut bad = CovariateMeta::binary("X", "x");
        bad.levels.push("2".into());
        assert!(Dataset::new(vec![bad], vec![]).is_err());
        let dup = vec![CovariateMeta::binary("X", "x"), CovariateMeta::binary("X", "y")];
        assert!(Dataset::new(dup, vec![]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = fixture(1000);
        let a = split_dataset(&ds, [0.4, 0.4, 0.2], 7).unwrap();
        assert_eq!(a.sizes(), (400, 400, 200));
        let b = split_dataset(&ds, [0.4, 0.4, 0.2], 7).unwrap();
        assert_eq!(a, b);
        let small = fixture(10);
        let all_train = split_dataset(&small, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all_train.sizes(), (10, 0, 0));
        assert!(split_dataset(&fixture(2), [0.4, 0.4, 0.2], 1).is_err());
        assert!(split_dataset(&small, [0.5, 0.5, 0.5], 1).is_err());
    }

    #[test]
    fn restriction_on_single_confounder() {
        let ds = fixture(4);
        let strata = apply_restriction(&ds.all_rows(), &RestrictionContext::new(vec!["HTN".into()]), &ds, 1).unwrap();
        assert_eq!(strata.len(), 2);
        assert!(strata.values().all(|s| s.len() == 2));
    }

    #[test]
    fn empty_context_is_identity() {
        let ds = fixture(6);
        let strata = apply_restriction(&ds.all_rows(), &RestrictionContext::default(), &ds, 1).unwrap();
        assert_eq!(strata.len(), 1);
        assert_eq!(strata[&StratumKey(vec![])], ds.all_rows());
    }

    #[test]
    fn small_strata_are_dropped() {
        // Joint (HTN, DM) levels by hand: 0,0 -> {0,1,8}; 1,0 -> {2,3}; 0,1 -> {4,5}; 1,1 -> {6,7}.
        let samples: Vec<Sample> = [(0, 0), (0, 0), (1, 0), (1, 0), (0, 1), (0, 1), (1, 1), (1, 1)]
            .iter()
            .chain(std::iter::once(&(0, 0)))
            .enumerate()
            .map(|(i, &(h, d))| Sample { id: format!("s{i}"), outcome: 0.0, treatment: 0, covariates: vec![h as f64, d as f64] })
            .collect();
        let ds = Dataset::new(meta2(), samples).unwrap();
        let ctx = RestrictionContext::new(vec!["HTN".into(), "DM".into()]);
        let strata = apply_restriction(&ds.all_rows(), &ctx, &ds, 3).unwrap();
        assert_eq!(strata.len(), 1);
        assert_eq!(strata[&StratumKey(vec!["0".into(), "0".into()])], vec![0, 1, 8]);
    }

    #[test]
    fn continuous_restriction_rejected() {
        let meta = vec![CovariateMeta::continuous("AGE", "age in years")];
        let ds = Dataset::new(meta, vec![Sample { id: "a".into(), outcome: 0.0, treatment: 1, covariates: vec![50.0] }]).unwrap();
        let err = apply_restriction(&[0], &RestrictionContext::new(vec!["AGE".into()]), &ds, 1).unwrap_err();
        assert!(matches!(err, DatasetError::UnsupportedRestriction(_)));
    }

    #[test]
    fn remaining_covariates_cases() {
        let meta: Vec<CovariateMeta> = ["A", "B", "HTN", "C", "D"].iter().map(|n| CovariateMeta::binary(n, n)).collect();
        let ds = Dataset::new(meta, vec![]).unwrap();
        let v: BTreeSet<String> = ["HTN".to_string()].into();
        assert_eq!(remaining_covariates(&ds, &v).unwrap(), vec!["A", "B", "C", "D"]);
        assert_eq!(remaining_covariates(&ds, &BTreeSet::new()).unwrap().len(), 5);
        let all: BTreeSet<String> = ds.covariate_names().into_iter().collect();
        assert!(remaining_covariates(&ds, &all).unwrap().is_empty());
        let unknown: BTreeSet<String> = ["NOPE".to_string()].into();
        assert!(remaining_covariates(&ds, &unknown).is_err());
    }
}
