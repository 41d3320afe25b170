//! Training with early stopping, model bundles, repeated-seed experiments
//! and random hyperparameter search.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    apply_preprocessing, fit_preprocessing, load_csv, stratified_split, stratified_split_indices, PreprocessingRecord,
    Schema, SplitSpec, SurvivalDataset,
};
use crate::error::{Result, SurvError};
use crate::metrics::{
    expected_time, harrell_cindex, kaplan_meier, ks_statistic, mean_std, rank_models, score_curves, Direction,
    MetricRanks, MetricReport, SeedMetrics, StepFunction,
};
use crate::models::{BackboneSpec, EmbeddingSpec, HeadKind, ModelSpec, NetLayout, SurvivalNet};
use crate::nn::{adam_step, Activation, AdamConfig, AdamState};
use crate::simulation::{generate, generate_synthetic, SimConfig, SYNTHETIC_DIM};
use crate::survhl::SurvHLConfig;
use crate::timegrid::{build_grid, DiscreteSurvival, TimeGrid};

const TRAIN_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub head: HeadKind,
    pub n_blocks: usize,
    pub hidden: usize,
    pub n_members: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub r: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub embedding: Option<EmbeddingSpec>,
    pub grid_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            head: HeadKind::Las,
            n_blocks: 2,
            hidden: 128,
            n_members: 8,
            activation: Activation::Relu,
            layer_norm: false,
            r: 3,
            learning_rate: 1e-3,
            batch_size: 64,
            dropout: 0.05,
            embedding: Some(EmbeddingSpec {
                bins: 32,
                width: 8,
                activation: false,
            }),
            grid_fraction: 1.0,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            head: self.head,
            n_members: self.n_members,
            backbone: BackboneSpec {
                n_blocks: self.n_blocks,
                hidden: self.hidden,
                activation: self.activation,
                layer_norm: self.layer_norm,
                dropout: self.dropout,
            },
            embedding: self.embedding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        SurvHLConfig::new(self.r)?;
        if self.n_blocks == 0 {
            return Err(SurvError::Config("need at least one block".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SurvError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(SurvError::Config("batch size must be positive".into()));
        }
        if !(self.grid_fraction > 0.0 && self.grid_fraction <= 1.0) {
            return Err(SurvError::Config(format!("grid fraction must be in (0, 1], got {}", self.grid_fraction)));
        }
        if self.max_epochs == 0 {
            return Err(SurvError::Config("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cindex: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub initial_val_cindex: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub best_val_cindex: Option<f64>,
}

/// A trained network with everything needed to score new data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub schema: Option<Schema>,
    pub record: PreprocessingRecord,
    pub grid: TimeGrid,
    /// Kaplan–Meier censoring survival of the training data.
    pub censoring: StepFunction,
    pub net: SurvivalNet,
}

impl ModelBundle {
    pub fn predict(&self, x: ndarray::ArrayView2<f64>) -> Result<Vec<DiscreteSurvival>> {
        self.net.predict(x, &self.grid)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.record.feature_layout().0
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn check_same_features(a: &SurvivalDataset, b: &SurvivalDataset) -> Result<()> {
    if a.feature_names != b.feature_names {
        return Err(SurvError::Shape(format!(
            "feature mismatch: {:?} vs {:?}",
            a.feature_names, b.feature_names
        )));
    }
    Ok(())
}

fn validation_cindex(net: &SurvivalNet, grid: &TimeGrid, val: &SurvivalDataset) -> Result<f64> {
    let curves = net.predict(val.features.view(), grid)?;
    let predicted: Vec<f64> = curves.iter().map(|c| expected_time(c, grid)).collect();
    harrell_cindex(&predicted, &val.times, &val.events)
}

/// Mini-batch Adam on the summed member losses. With a validation set the
/// parameters of the best validation C-index are kept and training stops
/// after `patience` epochs without strict improvement; without one all
/// `max_epochs` run and the final parameters are kept.
pub fn train(train_set: &SurvivalDataset, val_set: Option<&SurvivalDataset>, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if let Some(v) = val_set {
        check_same_features(train_set, v)?;
    }
    let n = train_set.n_rows();
    let grid = build_grid(&train_set.times, &train_set.events, cfg.grid_fraction)?;
    let mut observed: Vec<f64> = train_set
        .times
        .iter()
        .zip(&train_set.events)
        .filter(|(_, e)| **e)
        .map(|(t, _)| *t)
        .collect();
    let time_scale = median(&mut observed);
    let mut net = SurvivalNet::new(cfg.model_spec(), train_set, &grid, time_scale, cfg.seed)?;
    let loss_cfg = SurvHLConfig::new(cfg.r)?;
    let idxs: Vec<usize> = train_set.times.iter().map(|&t| grid.interval_index(t)).collect();
    let mut adam = AdamState::new(&net.store, AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);

    let initial = val_set.map(|v| validation_cindex(&net, &grid, v)).transpose()?;
    let mut best = initial;
    let mut best_params = net.store.snapshot();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train_set.features.select(Axis(0), chunk);
            let bi: Vec<usize> = chunk.iter().map(|&i| idxs[i]).collect();
            let be: Vec<bool> = chunk.iter().map(|&i| train_set.events[i]).collect();
            let loss = net
                .batch_loss(x.view(), &bi, &be, &grid, &loss_cfg, Some(&mut rng), true)
                .map_err(|e| diverged(epoch, e))?;
            if !loss.is_finite() {
                return Err(SurvError::Divergence {
                    epoch,
                    message: format!("training loss {loss}"),
                });
            }
            adam_step(&mut net.store, &mut adam).map_err(|e| diverged(epoch, e))?;
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / n as f64;
        let val_c = val_set
            .map(|v| validation_cindex(&net, &grid, v).map_err(|e| diverged(epoch, e)))
            .transpose()?;
        log::debug!("epoch {epoch}: loss {train_loss:.6}, val C-index {val_c:?}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_cindex: val_c,
        });
        if let (Some(c), Some(b)) = (val_c, best) {
            if c > b {
                best = Some(c);
                best_params = net.store.snapshot();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if val_set.is_some() {
        net.store.restore(&best_params)?;
    } else {
        best_epoch = epochs.len();
    }
    let censored: Vec<bool> = train_set.events.iter().map(|e| !e).collect();
    let censoring = kaplan_meier(&train_set.times, &censored)?;
    let bundle = ModelBundle {
        config: *cfg,
        schema: None,
        record: train_set.record.clone(),
        grid,
        censoring,
        net,
    };
    let log = TrainLog {
        initial_val_cindex: initial,
        epochs,
        best_epoch,
        best_val_cindex: best,
    };
    Ok((bundle, log))
}

fn diverged(epoch: usize, e: SurvError) -> SurvError {
    match e {
        SurvError::NonFiniteGradient(name) => SurvError::Divergence {
            epoch,
            message: format!("non-finite gradient in {name}"),
        },
        SurvError::Validation(msg) => SurvError::Divergence { epoch, message: msg },
        other => other,
    }
}

/// Metrics of the bundle on a test set. The bundle is not modified.
pub fn evaluate(bundle: &ModelBundle, test: &SurvivalDataset) -> Result<MetricReport> {
    evaluate_with(bundle, test, false)
}

/// As [`evaluate`], optionally adding the KS statistic against the
/// uncensored test times.
pub fn evaluate_with(bundle: &ModelBundle, test: &SurvivalDataset, with_ks: bool) -> Result<MetricReport> {
    let expected = bundle.feature_names();
    if test.feature_names != expected {
        return Err(SurvError::Shape(format!(
            "test features {:?} do not match the model's {:?}",
            test.feature_names, expected
        )));
    }
    let curves = bundle.predict(test.features.view())?;
    let (c_index, ibs, integrated_auc) = score_curves(&curves, &bundle.grid, &test.times, &test.events, &bundle.censoring)?;
    let ks = if with_ks {
        let observed: Vec<f64> = test.times.iter().zip(&test.events).filter(|(_, e)| **e).map(|(t, _)| *t).collect();
        Some(ks_statistic(&curves, &bundle.grid, &observed)?)
    } else {
        None
    };
    MetricReport::from_runs(vec![SeedMetrics {
        seed: bundle.config.seed,
        c_index,
        ibs,
        integrated_auc,
        ks,
    }])
}

pub const BUNDLE_FORMAT: &str = "tabsurv-bundle";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredArray {
    name: String,
    rows: usize,
    cols: usize,
    /// Little-endian f64 values, base64.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct BundleFile {
    format: String,
    version: u32,
    config: TrainConfig,
    schema: Option<Schema>,
    record: PreprocessingRecord,
    grid: TimeGrid,
    censoring: StepFunction,
    time_scale: f64,
    layout: NetLayout,
    params: Vec<StoredArray>,
}

fn encode_array(a: &Array2<f64>) -> String {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_array(s: &StoredArray) -> Result<Array2<f64>> {
    let bytes = BASE64
        .decode(&s.data)
        .map_err(|e| SurvError::Corrupt(format!("parameter {}: {e}", s.name)))?;
    if bytes.len() != s.rows * s.cols * 8 {
        return Err(SurvError::Corrupt(format!(
            "parameter {} has {} bytes, expected {}",
            s.name,
            bytes.len(),
            s.rows * s.cols * 8
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((s.rows, s.cols), values).map_err(|e| SurvError::Corrupt(e.to_string()))
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let file = BundleFile {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            config: self.config,
            schema: self.schema.clone(),
            record: self.record.clone(),
            grid: self.grid.clone(),
            censoring: self.censoring.clone(),
            time_scale: self.net.time_scale,
            layout: self.net.layout(),
            params: self
                .net
                .store
                .params()
                .iter()
                .map(|p| StoredArray {
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                    data: encode_array(&p.value),
                })
                .collect(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| SurvError::Corrupt(format!("unreadable bundle: {e}")))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(BUNDLE_FORMAT) {
            return Err(SurvError::Corrupt("not a model bundle".into()));
        }
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| SurvError::Corrupt("bundle has no version tag".into()))?;
        if version != u64::from(BUNDLE_VERSION) {
            return Err(SurvError::Version {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                supported: BUNDLE_VERSION,
            });
        }
        let file: BundleFile =
            serde_json::from_value(value).map_err(|e| SurvError::Corrupt(format!("malformed bundle: {e}")))?;
        let grid = TimeGrid::new(file.grid.taus().to_vec()).map_err(|e| SurvError::Corrupt(e.to_string()))?;
        let mut net = SurvivalNet::build(file.config.model_spec(), file.layout, file.time_scale, file.config.seed)
            .map_err(|e| SurvError::Corrupt(e.to_string()))?;
        if net.store.len() != file.params.len() {
            return Err(SurvError::Corrupt(format!(
                "bundle has {} parameter arrays, model needs {}",
                file.params.len(),
                net.store.len()
            )));
        }
        for (p, stored) in net.store.params_mut().iter_mut().zip(&file.params) {
            let arr = decode_array(stored)?;
            if p.name != stored.name || p.value.dim() != arr.dim() {
                return Err(SurvError::Corrupt(format!(
                    "parameter {} ({:?}) does not match {} ({:?})",
                    stored.name,
                    arr.dim(),
                    p.name,
                    p.value.dim()
                )));
            }
            p.value = arr;
        }
        Ok(ModelBundle {
            config: file.config,
            schema: file.schema,
            record: file.record,
            grid,
            censoring: file.censoring,
            net,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| SurvError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| SurvError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bundle, hex encoded.
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.to_bytes()?);
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureFile {
    pub path: PathBuf,
    pub schema: PathBuf,
}

/// Simulated outcomes over synthetic Gaussian or file-provided covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSource {
    pub n_rows: usize,
    pub n_features: usize,
    pub features: Option<FeatureFile>,
    pub config: SimConfig,
}

impl Default for SimulationSource {
    fn default() -> Self {
        SimulationSource {
            n_rows: 2982,
            n_features: SYNTHETIC_DIM,
            features: None,
            config: SimConfig::default(),
        }
    }
}

impl SimulationSource {
    pub fn generate(&self) -> Result<crate::simulation::SimulatedDataset> {
        match &self.features {
            Some(f) => {
                let schema = Schema::from_json_file(&f.schema)?;
                let raw = load_csv(&f.path, &schema)?;
                let data = crate::dataset::preprocess(&raw)?;
                generate(data.features, data.feature_names, &self.config)
            }
            None => generate_synthetic(self.n_rows, self.n_features, &self.config),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv { path: PathBuf, schema: PathBuf },
    Simulation(SimulationSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub config: TrainConfig,
}

/// Expands every model into one variant per (grid fraction, r) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub grid_fractions: Vec<f64>,
    pub r: Vec<u32>,
}

fn default_runs() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub data: DataSource,
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Defaults to the 52.5/17.5/30 protocol split seeded with `base_seed`.
    #[serde(default)]
    pub split: Option<SplitSpec>,
    /// Train on train + validation for `max_epochs` without early stopping.
    #[serde(default)]
    pub merge_validation: bool,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    /// Defaults to true for simulated data.
    #[serde(default)]
    pub ks: Option<bool>,
}

impl ExperimentPlan {
    /// Reads a plan; relative data paths are resolved against the plan's
    /// directory.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SurvError::io(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut plan.data {
            DataSource::Csv { path, schema } => {
                resolve(path);
                resolve(schema);
            }
            DataSource::Simulation(s) => {
                if let Some(f) = &mut s.features {
                    resolve(&mut f.path);
                    resolve(&mut f.schema);
                }
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(SurvError::Config("n_runs must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(SurvError::Config("plan has no models".into()));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(SurvError::Config("model names must be unique".into()));
        }
        for m in self.expanded_models() {
            m.config.validate().map_err(|e| SurvError::Config(format!("model {}: {e}", m.name)))?;
        }
        if let Some(s) = &self.split {
            s.validate()?;
            if s.validation <= 0.0 || s.test <= 0.0 {
                return Err(SurvError::Config("experiment split needs validation and test parts".into()));
            }
        }
        Ok(())
    }

    pub fn expanded_models(&self) -> Vec<ModelEntry> {
        match &self.sweep {
            None => self.models.clone(),
            Some(sw) => self
                .models
                .iter()
                .flat_map(|m| {
                    sw.grid_fractions.iter().flat_map(move |&g| {
                        sw.r.iter().map(move |&r| ModelEntry {
                            name: format!("{}[grid={g},r={r}]", m.name),
                            config: TrainConfig {
                                grid_fraction: g,
                                r,
                                ..m.config
                            },
                        })
                    })
                })
                .collect(),
        }
    }

    fn split_spec(&self) -> SplitSpec {
        self.split.unwrap_or_else(|| SplitSpec::protocol_default(self.base_seed))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub train: SurvivalDataset,
    pub validation: SurvivalDataset,
    pub test: SurvivalDataset,
}

/// Loads and splits the data. Preprocessing statistics come from the
/// training rows only.
pub fn prepare_data(source: &DataSource, split: &SplitSpec) -> Result<PreparedData> {
    match source {
        DataSource::Csv { path, schema } => {
            let schema = Schema::from_json_file(schema)?;
            let raw = load_csv(path, &schema)?;
            prepare_raw(&raw, split)
        }
        DataSource::Simulation(sim) => {
            let data = sim.generate()?.data;
            let (train, validation, test) = stratified_split(&data, split)?;
            Ok(PreparedData {
                train,
                validation,
                test,
            })
        }
    }
}

pub fn prepare_raw(raw: &crate::dataset::RawTable, split: &SplitSpec) -> Result<PreparedData> {
    let idx = stratified_split_indices(&raw.events, split)?;
    let train_raw = raw.select_rows(&idx.train);
    let record = fit_preprocessing(&train_raw)?;
    Ok(PreparedData {
        train: apply_preprocessing(&train_raw, &record)?,
        validation: apply_preprocessing(&raw.select_rows(&idx.validation), &record)?,
        test: apply_preprocessing(&raw.select_rows(&idx.test), &record)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub model: String,
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub c_index: f64,
    pub ibs: f64,
    pub integrated_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub config: TrainConfig,
    /// Absent when every run of this model failed.
    pub report: Option<MetricReport>,
    pub std: Option<MetricSpread>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_runs: usize,
    pub base_seed: u64,
    pub models: Vec<ModelSummary>,
    pub failures: Vec<RunFailure>,
}

/// Trains and evaluates every model for each run `r` with seed
/// `base_seed + r` on one fixed split, then aggregates means and ranks.
/// Failed runs are recorded; ranks use runs where every model succeeded.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentReport> {
    plan.validate()?;
    let data = prepare_data(&plan.data, &plan.split_spec())?;
    run_experiment_on(plan, &data)
}

pub fn run_experiment_on(plan: &ExperimentPlan, data: &PreparedData) -> Result<ExperimentReport> {
    plan.validate()?;
    let with_ks = plan.ks.unwrap_or(matches!(plan.data, DataSource::Simulation(_)));
    let models = plan.expanded_models();
    let merged = if plan.merge_validation {
        Some(data.train.concat(&data.validation)?)
    } else {
        None
    };
    let mut results: Vec<Vec<Option<SeedMetrics>>> = vec![Vec::with_capacity(plan.n_runs); models.len()];
    let mut failures = Vec::new();
    for run in 0..plan.n_runs {
        let seed = plan.base_seed + run as u64;
        for (k, m) in models.iter().enumerate() {
            let cfg = TrainConfig { seed, ..m.config };
            let outcome = match &merged {
                Some(all) => train(all, None, &cfg),
                None => train(&data.train, Some(&data.validation), &cfg),
            }
            .and_then(|(bundle, _)| evaluate_with(&bundle, &data.test, with_ks));
            match outcome {
                Ok(report) => results[k].push(Some(report.per_seed[0].clone())),
                Err(e) => {
                    log::warn!("model {} run {run} failed: {e}", m.name);
                    failures.push(RunFailure {
                        model: m.name.clone(),
                        run,
                        seed,
                        error: e.to_string(),
                    });
                    results[k].push(None);
                }
            }
        }
    }

    let complete: Vec<usize> = (0..plan.n_runs).filter(|&r| results.iter().all(|m| m[r].is_some())).collect();
    let ranks = if complete.is_empty() {
        None
    } else {
        let column = |f: fn(&SeedMetrics) -> f64| -> Vec<Vec<f64>> {
            results
                .iter()
                .map(|m| complete.iter().map(|&r| f(m[r].as_ref().expect("complete run"))).collect())
                .collect()
        };
        Some((
            rank_models(&column(|s| s.c_index), Direction::HigherIsBetter)?,
            rank_models(&column(|s| s.ibs), Direction::LowerIsBetter)?,
            rank_models(&column(|s| s.integrated_auc), Direction::HigherIsBetter)?,
        ))
    };

    let summaries = models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let runs: Vec<SeedMetrics> = results[k].iter().flatten().cloned().collect();
            if runs.is_empty() {
                return Ok(ModelSummary {
                    name: m.name.clone(),
                    config: m.config,
                    report: None,
                    std: None,
                });
            }
            let spread = |f: fn(&SeedMetrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>()).1;
            let std = MetricSpread {
                c_index: spread(|s| s.c_index),
                ibs: spread(|s| s.ibs),
                integrated_auc: spread(|s| s.integrated_auc),
                ks: runs
                    .iter()
                    .all(|s| s.ks.is_some())
                    .then(|| spread(|s| s.ks.unwrap_or(0.0))),
            };
            let mut report = MetricReport::from_runs(runs)?;
            if let Some((c, i, a)) = &ranks {
                report.rank_mean = Some(MetricRanks {
                    c_index: c.mean[k],
                    ibs: i.mean[k],
                    integrated_auc: a.mean[k],
                });
                report.rank_std = Some(MetricRanks {
                    c_index: c.std[k],
                    ibs: i.std[k],
                    integrated_auc: a.std[k],
                });
            }
            Ok(ModelSummary {
                name: m.name.clone(),
                config: m.config,
                report: Some(report),
                std: Some(std),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport {
        n_runs: plan.n_runs,
        base_seed: plan.base_seed,
        models: summaries,
        failures,
    })
}

/// One row per model: mean, std, mean rank and rank std per metric.
pub fn report_table(report: &ExperimentReport) -> String {
    let with_ks = report.models.iter().any(|m| m.report.as_ref().is_some_and(|r| r.ks.is_some()));
    let mut header = vec!["model".to_string()];
    for metric in ["cindex", "ibs", "auc"] {
        for suffix in ["mean", "std", "rank", "rank_std"] {
            header.push(format!("{metric}_{suffix}"));
        }
    }
    if with_ks {
        header.push("ks_mean".into());
        header.push("ks_std".into());
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for m in &report.models {
        let r = m.report.as_ref();
        let s = m.std.as_ref();
        let rm = r.and_then(|r| r.rank_mean.as_ref());
        let rs = r.and_then(|r| r.rank_std.as_ref());
        let mut row = vec![m.name.clone()];
        row.extend([
            fmt(r.map(|r| r.c_index)),
            fmt(s.map(|s| s.c_index)),
            fmt(rm.map(|x| x.c_index)),
            fmt(rs.map(|x| x.c_index)),
            fmt(r.map(|r| r.ibs)),
            fmt(s.map(|s| s.ibs)),
            fmt(rm.map(|x| x.ibs)),
            fmt(rs.map(|x| x.ibs)),
            fmt(r.map(|r| r.integrated_auc)),
            fmt(s.map(|s| s.integrated_auc)),
            fmt(rm.map(|x| x.integrated_auc)),
            fmt(rs.map(|x| x.integrated_auc)),
        ]);
        if with_ks {
            row.push(fmt(r.and_then(|r| r.ks)));
            row.push(fmt(s.and_then(|s| s.ks)));
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

/// Writes `report.json` and `table.csv` into `dir`.
pub fn write_experiment(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| SurvError::io(dir, e))?;
    let json_path = dir.join("report.json");
    crate::simulation::write_json(&json_path, report)?;
    let csv_path = dir.join("table.csv");
    std::fs::write(&csv_path, report_table(report)).map_err(|e| SurvError::io(&csv_path, e))?;
    Ok((json_path, csv_path))
}

/// Per-head hyperparameter domains for random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub head: HeadKind,
    /// Inclusive range of block counts.
    pub n_blocks: (usize, usize),
    pub hidden: Vec<usize>,
    pub n_members: Vec<usize>,
    pub activations: Vec<Activation>,
    pub r: Vec<u32>,
    /// Log-uniform range.
    pub learning_rate: (f64, f64),
    pub batch_size: Vec<usize>,
    /// Log-uniform range; no dropout when absent.
    pub dropout: Option<(f64, f64)>,
    pub layer_norm: Vec<bool>,
    pub embedding_bins: Vec<usize>,
    pub embedding_width: Vec<usize>,
    pub embedding_activation: Vec<bool>,
    pub grid_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl SearchSpace {
    pub fn for_head(head: HeadKind) -> Self {
        use Activation::{Relu, Selu, Silu};
        let base = SearchSpace {
            head,
            n_blocks: (1, 3),
            hidden: vec![128, 256, 512],
            n_members: vec![8, 16, 32],
            activations: vec![Relu, Silu, Selu],
            r: vec![1, 2, 3, 4, 5],
            learning_rate: (1e-4, 5e-3),
            batch_size: vec![32, 64, 96],
            dropout: None,
            layer_norm: vec![false],
            embedding_bins: vec![32, 48, 64],
            embedding_width: vec![8, 12, 16],
            embedding_activation: vec![false, true],
            grid_fraction: 1.0,
            max_epochs: 200,
            patience: 10,
        };
        match head {
            HeadKind::Ls => SearchSpace {
                n_blocks: (1, 4),
                n_members: vec![1],
                layer_norm: vec![false, true],
                ..base
            },
            HeadKind::Las => SearchSpace {
                dropout: Some((1e-2, 1e-1)),
                ..base
            },
            HeadKind::Wsa | HeadKind::Was => SearchSpace {
                hidden: vec![64, 128, 256],
                activations: vec![Relu, Selu],
                r: vec![1, 3, 5],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.n_blocks;
        let (lr_lo, lr_hi) = self.learning_rate;
        let empty = self.hidden.is_empty()
            || self.n_members.is_empty()
            || self.activations.is_empty()
            || self.r.is_empty()
            || self.batch_size.is_empty()
            || self.layer_norm.is_empty()
            || self.embedding_bins.is_empty()
            || self.embedding_width.is_empty()
            || self.embedding_activation.is_empty();
        if empty || lo == 0 || lo > hi || !(lr_lo > 0.0 && lr_lo <= lr_hi) {
            return Err(SurvError::Config("search space has an empty or invalid domain".into()));
        }
        if let Some((a, b)) = self.dropout {
            if !(a > 0.0 && a <= b && b < 1.0) {
                return Err(SurvError::Config(format!("invalid dropout range [{a}, {b}]")));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng, seed: u64) -> TrainConfig {
        fn pick<T: Copy>(rng: &mut impl Rng, v: &[T]) -> T {
            v[rng.random_range(0..v.len())]
        }
        let log_uniform = |rng: &mut dyn rand::RngCore, (a, b): (f64, f64)| {
            let u: f64 = rng.random();
            (a.ln() + u * (b.ln() - a.ln())).exp()
        };
        TrainConfig {
            head: self.head,
            n_blocks: rng.random_range(self.n_blocks.0..=self.n_blocks.1),
            hidden: pick(rng, &self.hidden),
            n_members: pick(rng, &self.n_members),
            activation: pick(rng, &self.activations),
            layer_norm: pick(rng, &self.layer_norm),
            r: pick(rng, &self.r),
            learning_rate: log_uniform(rng, self.learning_rate),
            batch_size: pick(rng, &self.batch_size),
            dropout: self.dropout.map_or(0.0, |d| log_uniform(rng, d)),
            embedding: Some(EmbeddingSpec {
                bins: pick(rng, &self.embedding_bins),
                width: pick(rng, &self.embedding_width),
                activation: pick(rng, &self.embedding_activation),
            }),
            grid_fraction: self.grid_fraction,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }

    /// Whether `cfg` lies inside this space.
    pub fn contains(&self, cfg: &TrainConfig) -> bool {
        let in_range = |v: f64, (a, b): (f64, f64)| v >= a && v <= b;
        let dropout_ok = match self.dropout {
            Some(d) => in_range(cfg.dropout, d),
            None => cfg.dropout == 0.0,
        };
        let embedding_ok = cfg.embedding.is_some_and(|e| {
            self.embedding_bins.contains(&e.bins)
                && self.embedding_width.contains(&e.width)
                && self.embedding_activation.contains(&e.activation)
        });
        cfg.head == self.head
            && (self.n_blocks.0..=self.n_blocks.1).contains(&cfg.n_blocks)
            && self.hidden.contains(&cfg.hidden)
            && self.n_members.contains(&cfg.n_members)
            && self.activations.contains(&cfg.activation)
            && self.layer_norm.contains(&cfg.layer_norm)
            && self.r.contains(&cfg.r)
            && in_range(cfg.learning_rate, self.learning_rate)
            && self.batch_size.contains(&cfg.batch_size)
            && dropout_ok
            && embedding_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    pub val_cindex: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub best_val_cindex: f64,
    pub trials: Vec<Trial>,
}

/// Samples `budget` configurations and keeps the one with the highest
/// validation C-index.
pub fn random_search(
    space: &SearchSpace,
    budget: usize,
    train_set: &SurvivalDataset,
    val_set: &SurvivalDataset,
    seed: u64,
) -> Result<SearchResult> {
    space.validate()?;
    if budget == 0 {
        return Err(SurvError::Config("search budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<TrainConfig> = (0..budget).map(|_| space.sample(&mut rng, seed)).collect();
    search_candidates(&candidates, train_set, val_set)
}

/// Trains each candidate and returns the first one reaching the highest
/// validation C-index.
pub fn search_candidates(candidates: &[TrainConfig], train_set: &SurvivalDataset, val_set: &SurvivalDataset) -> Result<SearchResult> {
    let mut trials = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    for (k, cfg) in candidates.iter().enumerate() {
        match train(train_set, Some(val_set), cfg) {
            Ok((_, log)) => {
                let score = log.best_val_cindex.unwrap_or(f64::NEG_INFINITY);
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((k, score));
                }
                trials.push(Trial {
                    config: *cfg,
                    val_cindex: log.best_val_cindex,
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("search trial {k} failed: {e}");
                trials.push(Trial {
                    config: *cfg,
                    val_cindex: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let (k, score) = best.ok_or_else(|| SurvError::Config("every search trial failed".into()))?;
    Ok(SearchResult {
        best: candidates[k],
        best_val_cindex: score,
        trials,
    })
}
