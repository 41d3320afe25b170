//! Tabular survival data: CSV ingestion, preprocessing and stratified splits.
//!
//! Numeric columns are standardized with statistics fitted on observed cells
//! (population standard deviation), missing numeric cells are mean-imputed,
//! and categorical columns are one-hot encoded with an extra slot for missing
//! values when missingness was seen during fitting. Columns that are missing
//! for every row are dropped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};

/// Role of a CSV column as declared by the schema file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    Numeric,
    Categorical,
    Time,
    Event,
    /// Present in the file but not used.
    Ignore,
}

/// Column-role mapping read from a small JSON file, e.g.
///
/// ```json
/// { "columns": { "age": "numeric", "grade": "categorical",
///                "time": "time", "cens": "event" },
///   "missing": ["", "NA"] }
/// ```
///
/// Columns absent from the mapping are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: BTreeMap<String, ColumnRole>,
    #[serde(default = "default_missing")]
    pub missing: Vec<String>,
}

fn default_missing() -> Vec<String> {
    vec![String::new()]
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SurvError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn single_role(&self, role: ColumnRole) -> Result<&str> {
        let mut found = self
            .columns
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(name, _)| name.as_str());
        let first = found
            .next()
            .ok_or_else(|| SurvError::Validation(format!("schema declares no {role:?} column")))?;
        if found.next().is_some() {
            return Err(SurvError::Validation(format!(
                "schema declares more than one {role:?} column"
            )));
        }
        Ok(first)
    }

    fn is_missing(&self, cell: &str) -> bool {
        let trimmed = cell.trim();
        self.missing.iter().any(|m| m == trimmed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnValues {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn missing_count(&self) -> usize {
        match self {
            ColumnValues::Numeric(v) => v.iter().filter(|c| c.is_none()).count(),
            ColumnValues::Categorical(v) => v.iter().filter(|c| c.is_none()).count(),
        }
    }

    fn select(&self, rows: &[usize]) -> ColumnValues {
        match self {
            ColumnValues::Numeric(v) => ColumnValues::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnValues::Categorical(v) => {
                ColumnValues::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawColumn {
    pub name: String,
    pub values: ColumnValues,
}

impl RawColumn {
    pub fn numeric(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        RawColumn {
            name: name.into(),
            values: ColumnValues::Numeric(values),
        }
    }

    pub fn categorical(name: impl Into<String>, values: Vec<Option<String>>) -> Self {
        RawColumn {
            name: name.into(),
            values: ColumnValues::Categorical(values),
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self.values {
            ColumnValues::Numeric(_) => ColumnKind::Numeric,
            ColumnValues::Categorical(_) => ColumnKind::Categorical,
        }
    }
}

/// Feature columns with per-cell missing flags, plus the survival labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub time_column: String,
    pub event_column: String,
}

impl RawTable {
    pub fn new(
        columns: Vec<RawColumn>,
        times: Vec<f64>,
        events: Vec<bool>,
        time_column: impl Into<String>,
        event_column: impl Into<String>,
    ) -> Result<Self> {
        let n = times.len();
        if events.len() != n {
            return Err(SurvError::Validation(format!(
                "{} times but {} event indicators",
                n,
                events.len()
            )));
        }
        for col in &columns {
            if col.values.len() != n {
                return Err(SurvError::Validation(format!(
                    "column '{}' has {} values, expected {}",
                    col.name,
                    col.values.len(),
                    n
                )));
            }
        }
        if let Some((i, t)) = times.iter().enumerate().find(|(_, t)| !(t.is_finite() && **t > 0.0)) {
            return Err(SurvError::Validation(format!(
                "time at row {} must be finite and positive, got {}",
                i + 1,
                t
            )));
        }
        Ok(RawTable {
            columns,
            times,
            events,
            time_column: time_column.into(),
            event_column: event_column.into(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn missing_count(&self) -> usize {
        self.columns.iter().map(|c| c.values.missing_count()).sum()
    }

    pub fn select_rows(&self, rows: &[usize]) -> RawTable {
        RawTable {
            columns: self
                .columns
                .iter()
                .map(|c| RawColumn {
                    name: c.name.clone(),
                    values: c.values.select(rows),
                })
                .collect(),
            times: rows.iter().map(|&i| self.times[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
            time_column: self.time_column.clone(),
            event_column: self.event_column.clone(),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SurvError::io(path, e))?;
    load_csv_reader(file, schema)
}

/// Parses CSV text with a header row. Row numbers in errors are 1-based data
/// rows (the header is not counted).
pub fn load_csv_reader<R: Read>(reader: R, schema: &Schema) -> Result<RawTable> {
    let time_name = schema.single_role(ColumnRole::Time)?.to_string();
    let event_name = schema.single_role(ColumnRole::Event)?.to_string();

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(e, 0))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let position = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SurvError::Validation(format!("column '{name}' not found in header")))
    };
    let time_idx = position(&time_name)?;
    let event_idx = position(&event_name)?;
    for (name, role) in &schema.columns {
        if matches!(role, ColumnRole::Numeric | ColumnRole::Categorical) {
            position(name)?;
        }
    }

    // feature columns in header order
    let features: Vec<(usize, &str, ColumnRole)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| match schema.columns.get(h) {
            Some(role @ (ColumnRole::Numeric | ColumnRole::Categorical)) => Some((i, h.as_str(), *role)),
            _ => None,
        })
        .collect();

    let mut numeric: Vec<Vec<Option<f64>>> = vec![Vec::new(); features.len()];
    let mut categorical: Vec<Vec<Option<String>>> = vec![Vec::new(); features.len()];
    let mut times = Vec::new();
    let mut events = Vec::new();

    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(e, row))?;

        let time_cell = &record[time_idx];
        if schema.is_missing(time_cell) {
            return Err(SurvError::Validation(format!("missing time at row {row}")));
        }
        let time = parse_number(time_cell, row, &time_name)?;
        if !(time.is_finite() && time > 0.0) {
            return Err(SurvError::Validation(format!(
                "time must be positive at row {row}, got {time}"
            )));
        }
        let event_cell = &record[event_idx];
        if schema.is_missing(event_cell) {
            return Err(SurvError::Validation(format!("missing event indicator at row {row}")));
        }
        let event = parse_event(event_cell, row, &event_name)?;
        times.push(time);
        events.push(event);

        for (slot, (col_idx, name, role)) in features.iter().enumerate() {
            let cell = &record[*col_idx];
            let missing = schema.is_missing(cell);
            match role {
                ColumnRole::Numeric => {
                    let v = if missing {
                        None
                    } else {
                        let v = parse_number(cell, row, name)?;
                        if !v.is_finite() {
                            return Err(SurvError::Parse {
                                row,
                                column: name.to_string(),
                                message: format!("non-finite value '{cell}'"),
                            });
                        }
                        Some(v)
                    };
                    numeric[slot].push(v);
                }
                _ => categorical[slot].push(if missing { None } else { Some(cell.trim().to_string()) }),
            }
        }
    }

    if times.is_empty() {
        return Err(SurvError::Validation("CSV contains no data rows".into()));
    }
    if !events.iter().any(|&e| e) {
        return Err(SurvError::Validation("dataset is fully censored".into()));
    }

    let columns = features
        .iter()
        .enumerate()
        .map(|(slot, (_, name, role))| match role {
            ColumnRole::Numeric => RawColumn::numeric(*name, std::mem::take(&mut numeric[slot])),
            _ => RawColumn::categorical(*name, std::mem::take(&mut categorical[slot])),
        })
        .collect();
    RawTable::new(columns, times, events, time_name, event_name)
}

fn csv_error(e: csv::Error, row: usize) -> SurvError {
    let row = e
        .position()
        .map(|p| (p.record() as usize).max(row))
        .unwrap_or(row);
    SurvError::Parse {
        row,
        column: String::from("<record>"),
        message: e.to_string(),
    }
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| SurvError::Parse {
        row,
        column: column.to_string(),
        message: format!("cannot parse '{cell}' as a number"),
    })
}

fn parse_event(cell: &str, row: usize, column: &str) -> Result<bool> {
    match cell.trim() {
        "true" | "True" | "TRUE" => return Ok(true),
        "false" | "False" | "FALSE" => return Ok(false),
        _ => {}
    }
    let v = parse_number(cell, row, column)?;
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(SurvError::Validation(format!(
            "event indicator at row {row} must be 0 or 1, got '{}'",
            cell.trim()
        )))
    }
}

/// Fitted transformation for one source column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnTransform {
    /// `std == 0` marks a constant column, encoded as all zeros.
    Numeric { name: String, mean: f64, std: f64 },
    Categorical {
        name: String,
        categories: Vec<String>,
        missing_slot: bool,
    },
    Dropped { name: String },
}

impl ColumnTransform {
    pub fn name(&self) -> &str {
        match self {
            ColumnTransform::Numeric { name, .. }
            | ColumnTransform::Categorical { name, .. }
            | ColumnTransform::Dropped { name } => name,
        }
    }

    fn width(&self) -> usize {
        match self {
            ColumnTransform::Numeric { .. } => 1,
            ColumnTransform::Categorical {
                categories,
                missing_slot,
                ..
            } => categories.len() + usize::from(*missing_slot),
            ColumnTransform::Dropped { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessingRecord {
    pub columns: Vec<ColumnTransform>,
}

impl PreprocessingRecord {
    pub fn n_features(&self) -> usize {
        self.columns.iter().map(ColumnTransform::width).sum()
    }

    pub fn feature_layout(&self) -> (Vec<String>, Vec<FeatureKind>) {
        let mut names = Vec::new();
        let mut kinds = Vec::new();
        for col in &self.columns {
            match col {
                ColumnTransform::Numeric { name, .. } => {
                    names.push(name.clone());
                    kinds.push(FeatureKind::Numeric);
                }
                ColumnTransform::Categorical {
                    name,
                    categories,
                    missing_slot,
                } => {
                    for c in categories {
                        names.push(format!("{name}={c}"));
                        kinds.push(FeatureKind::OneHot);
                    }
                    if *missing_slot {
                        names.push(format!("{name}=<missing>"));
                        kinds.push(FeatureKind::OneHot);
                    }
                }
                ColumnTransform::Dropped { .. } => {}
            }
        }
        (names, kinds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    OneHot,
}

/// Dense features plus labels, ready for modelling.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    pub features: Array2<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    pub feature_names: Vec<String>,
    pub feature_kinds: Vec<FeatureKind>,
    pub record: PreprocessingRecord,
}

impl SurvivalDataset {
    /// Builds a dataset from already-numeric features. Every column is
    /// treated as numeric and recorded with identity statistics.
    pub fn from_numeric(
        features: Array2<f64>,
        times: Vec<f64>,
        events: Vec<bool>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = features.dim();
        if times.len() != n || events.len() != n {
            return Err(SurvError::Shape(format!(
                "{} feature rows, {} times, {} events",
                n,
                times.len(),
                events.len()
            )));
        }
        if feature_names.len() != d {
            return Err(SurvError::Shape(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                d
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(SurvError::Validation("features must be finite".into()));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(SurvError::Validation("times must be finite and positive".into()));
        }
        let record = PreprocessingRecord {
            columns: feature_names
                .iter()
                .map(|name| ColumnTransform::Numeric {
                    name: name.clone(),
                    mean: 0.0,
                    std: 1.0,
                })
                .collect(),
        };
        Ok(SurvivalDataset {
            features,
            times,
            events,
            feature_kinds: vec![FeatureKind::Numeric; d],
            feature_names,
            record,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn event_rate(&self) -> f64 {
        if self.events.is_empty() {
            return 0.0;
        }
        self.events.iter().filter(|&&e| e).count() as f64 / self.events.len() as f64
    }

    pub fn numeric_columns(&self) -> Vec<usize> {
        self.feature_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == FeatureKind::Numeric)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            features: self.features.select(ndarray::Axis(0), rows),
            times: rows.iter().map(|&i| self.times[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            record: self.record.clone(),
        }
    }

    /// Row-wise concatenation of two datasets with identical layouts.
    pub fn concat(&self, other: &SurvivalDataset) -> Result<SurvivalDataset> {
        if self.feature_names != other.feature_names {
            return Err(SurvError::Shape("cannot concatenate datasets with different features".into()));
        }
        let features = ndarray::concatenate(ndarray::Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| SurvError::Shape(e.to_string()))?;
        let mut times = self.times.clone();
        times.extend_from_slice(&other.times);
        let mut events = self.events.clone();
        events.extend_from_slice(&other.events);
        Ok(SurvivalDataset {
            features,
            times,
            events,
            feature_names: self.feature_names.clone(),
            feature_kinds: self.feature_kinds.clone(),
            record: self.record.clone(),
        })
    }
}

/// Fits preprocessing statistics on `raw` and transforms it.
pub fn preprocess(raw: &RawTable) -> Result<SurvivalDataset> {
    let record = fit_preprocessing(raw)?;
    apply_preprocessing(raw, &record)
}

pub fn fit_preprocessing(raw: &RawTable) -> Result<PreprocessingRecord> {
    if raw.n_rows() == 0 {
        return Err(SurvError::Validation("cannot preprocess an empty table".into()));
    }
    let columns: Vec<ColumnTransform> = raw.columns.iter().map(fit_column).collect();
    let record = PreprocessingRecord { columns };
    if record.n_features() == 0 {
        return Err(SurvError::Validation("no feature survives preprocessing".into()));
    }
    Ok(record)
}

fn fit_column(col: &RawColumn) -> ColumnTransform {
    let name = col.name.clone();
    match &col.values {
        ColumnValues::Numeric(values) => {
            let observed: Vec<f64> = values.iter().flatten().copied().collect();
            if observed.is_empty() {
                return ColumnTransform::Dropped { name };
            }
            let n = observed.len() as f64;
            let mean = observed.iter().sum::<f64>() / n;
            let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let std = if std <= 1e-12 * mean.abs().max(1.0) { 0.0 } else { std };
            ColumnTransform::Numeric { name, mean, std }
        }
        ColumnValues::Categorical(values) => {
            let categories: BTreeSet<&String> = values.iter().flatten().collect();
            if categories.is_empty() {
                return ColumnTransform::Dropped { name };
            }
            ColumnTransform::Categorical {
                name,
                categories: categories.into_iter().cloned().collect(),
                missing_slot: values.iter().any(Option::is_none),
            }
        }
    }
}

/// Transforms `raw` with previously fitted statistics only.
pub fn apply_preprocessing(raw: &RawTable, record: &PreprocessingRecord) -> Result<SurvivalDataset> {
    if raw.columns.len() != record.columns.len()
        || raw
            .columns
            .iter()
            .zip(&record.columns)
            .any(|(c, t)| c.name != t.name())
    {
        return Err(SurvError::Validation(format!(
            "column mismatch: table has [{}], record has [{}]",
            raw.columns.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", "),
            record.columns.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
        )));
    }
    let n = raw.n_rows();
    let d = record.n_features();
    let mut features = Array2::<f64>::zeros((n, d));
    let mut offset = 0;
    for (col, transform) in raw.columns.iter().zip(&record.columns) {
        match (transform, &col.values) {
            (ColumnTransform::Dropped { .. }, _) => {}
            (ColumnTransform::Numeric { mean, std, .. }, ColumnValues::Numeric(values)) => {
                for (i, v) in values.iter().enumerate() {
                    features[[i, offset]] = match v {
                        Some(x) if *std > 0.0 => (x - mean) / std,
                        _ => 0.0,
                    };
                }
                offset += 1;
            }
            (
                ColumnTransform::Categorical {
                    categories,
                    missing_slot,
                    ..
                },
                ColumnValues::Categorical(values),
            ) => {
                for (i, v) in values.iter().enumerate() {
                    match v {
                        Some(cat) => {
                            if let Ok(k) = categories.binary_search(cat) {
                                features[[i, offset + k]] = 1.0;
                            }
                        }
                        None if *missing_slot => features[[i, offset + categories.len()]] = 1.0,
                        None => {}
                    }
                }
                offset += transform.width();
            }
            _ => {
                return Err(SurvError::Validation(format!(
                    "column '{}' kind does not match the fitted record",
                    col.name
                )))
            }
        }
    }
    let (feature_names, feature_kinds) = record.feature_layout();
    Ok(SurvivalDataset {
        features,
        times: raw.times.clone(),
        events: raw.events.clone(),
        feature_names,
        feature_kinds,
        record: record.clone(),
    })
}

/// Train/validation/test fractions and the shuffling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 30% test, then 25% of the remainder for validation.
    pub fn protocol_default(seed: u64) -> Self {
        SplitSpec {
            train: 0.525,
            validation: 0.175,
            test: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || self.train <= 0.0 {
            return Err(SurvError::Validation(format!(
                "split fractions must be nonnegative with a positive training part: {parts:?}"
            )));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(SurvError::Validation(format!("split fractions must sum to 1: {parts:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits row indices separately within the censored and uncensored strata.
/// Rounding remainders go to the training part.
pub fn stratified_split_indices(events: &[bool], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for stratum in [false, true] {
        let mut rows: Vec<usize> = (0..events.len()).filter(|&i| events[i] == stratum).collect();
        if rows.len() < 3 {
            return Err(SurvError::Validation(format!(
                "stratum event={} has {} rows, need at least 3",
                u8::from(stratum),
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        let n = rows.len() as f64;
        let n_val = ((spec.validation * n) + 1e-9).floor() as usize;
        let n_test = ((spec.test * n) + 1e-9).floor() as usize;
        let n_train = rows.len() - n_val - n_test;
        out.train.extend_from_slice(&rows[..n_train]);
        out.validation.extend_from_slice(&rows[n_train..n_train + n_val]);
        out.test.extend_from_slice(&rows[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

pub fn stratified_split(
    data: &SurvivalDataset,
    spec: &SplitSpec,
) -> Result<(SurvivalDataset, SurvivalDataset, SurvivalDataset)> {
    let idx = stratified_split_indices(&data.events, spec)?;
    Ok((data.subset(&idx.train), data.subset(&idx.validation), data.subset(&idx.test)))
}
