//! Bimodal synthetic survival data: two latent clusters with Weibull
//! proportional-hazards event times sampled by inversion.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnRole, Schema, SurvivalDataset};
use crate::error::{Result, SurvError};

const BETA_STREAM: u64 = 1;
const CLUSTER_STREAM: u64 = 2;
const TIME_STREAM: u64 = 3;
const CENSOR_STREAM: u64 = 4;
const FEATURE_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub rate0: f64,
    pub shape0: f64,
    pub rate1: f64,
    pub shape1: f64,
    /// Entries of the cluster-0 coefficients are drawn from `U[lo, hi]`.
    pub beta0_range: (f64, f64),
    pub beta1_range: (f64, f64),
    pub censoring_rate: f64,
    pub cluster_prob: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rate0: 1e-5,
            shape0: 4.0,
            rate1: 1e-10,
            shape1: 6.0,
            beta0_range: (0.0, 1.0),
            beta1_range: (-1.0, 1.0),
            censoring_rate: 0.2,
            cluster_prob: 0.5,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rate0", self.rate0),
            ("shape0", self.shape0),
            ("rate1", self.rate1),
            ("shape1", self.shape1),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SurvError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return Err(SurvError::Config(format!("censoring_rate must be in [0, 1), got {}", self.censoring_rate)));
        }
        if !(0.0..=1.0).contains(&self.cluster_prob) {
            return Err(SurvError::Config(format!("cluster_prob must be in [0, 1], got {}", self.cluster_prob)));
        }
        for (lo, hi) in [self.beta0_range, self.beta1_range] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(SurvError::Config(format!("invalid coefficient range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Weibull PH law `S(t|x) = exp(-rate * exp(beta.x) * t^shape)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub rate: f64,
    pub shape: f64,
    pub beta: Vec<f64>,
}

impl ClusterParams {
    pub fn survival(&self, x: ArrayView1<f64>, t: f64) -> f64 {
        (-self.rate * self.linear_predictor(x).exp() * t.powf(self.shape)).exp()
    }

    pub fn linear_predictor(&self, x: ArrayView1<f64>) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws both clusters' coefficient vectors for `d` features.
pub fn draw_cluster_params(cfg: &SimConfig, d: usize) -> Result<[ClusterParams; 2]> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, BETA_STREAM);
    let u0 = Uniform::new_inclusive(cfg.beta0_range.0, cfg.beta0_range.1).map_err(|e| SurvError::Config(e.to_string()))?;
    let u1 = Uniform::new_inclusive(cfg.beta1_range.0, cfg.beta1_range.1).map_err(|e| SurvError::Config(e.to_string()))?;
    let beta0 = (0..d).map(|_| u0.sample(&mut rng)).collect();
    let beta1 = (0..d).map(|_| u1.sample(&mut rng)).collect();
    Ok([
        ClusterParams {
            rate: cfg.rate0,
            shape: cfg.shape0,
            beta: beta0,
        },
        ClusterParams {
            rate: cfg.rate1,
            shape: cfg.shape1,
            beta: beta1,
        },
    ])
}

/// I.i.d. Bernoulli(`prob`) cluster labels.
pub fn assign_clusters(n: usize, prob: f64, seed: u64) -> Result<Vec<u8>> {
    if n < 2 {
        return Err(SurvError::Config(format!("need at least 2 rows, got {n}")));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(SurvError::Config(format!("cluster probability must be in [0, 1], got {prob}")));
    }
    let mut rng = stream(seed, CLUSTER_STREAM);
    Ok((0..n).map(|_| u8::from(rng.random_bool(prob))).collect())
}

/// Inverts the Weibull PH survival at `u`.
pub fn sample_event_time(x: ArrayView1<f64>, params: &ClusterParams, u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(SurvError::Validation(format!("uniform draw must be in (0, 1), got {u}")));
    }
    let hazard = params.rate * params.linear_predictor(x).exp();
    let t = (-u.ln() / hazard).powf(1.0 / params.shape);
    if !(t.is_finite() && t > 0.0) {
        return Err(SurvError::Validation(format!("event time {t} is not positive and finite")));
    }
    Ok(t)
}

/// Default covariate count for the synthetic generator.
pub const SYNTHETIC_DIM: usize = 3;

/// Standard normal features with names `x0, x1, ...`.
pub fn synthetic_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, FEATURE_STREAM);
    Array2::from_shape_simple_fn((n, d), || standard_normal(&mut rng))
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; open interval keeps the log finite
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub data: SurvivalDataset,
    pub clusters: Vec<u8>,
    pub true_times: Vec<f64>,
    pub params: [ClusterParams; 2],
}

/// Event times for every row of `features`; censoring only flips the
/// indicator, the recorded time is always the true time.
pub fn generate(features: Array2<f64>, feature_names: Vec<String>, cfg: &SimConfig) -> Result<SimulatedDataset> {
    let (n, d) = features.dim();
    let params = draw_cluster_params(cfg, d)?;
    let clusters = assign_clusters(n, cfg.cluster_prob, cfg.seed)?;
    let mut time_rng = stream(cfg.seed, TIME_STREAM);
    let mut censor_rng = stream(cfg.seed, CENSOR_STREAM);
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for (i, &c) in clusters.iter().enumerate() {
        let u = 1.0 - time_rng.random::<f64>();
        let u = if u >= 1.0 { f64::EPSILON } else { u };
        times.push(sample_event_time(features.row(i), &params[usize::from(c)], u)?);
        events.push(!censor_rng.random_bool(cfg.censoring_rate));
    }
    let data = SurvivalDataset::from_numeric(features, times.clone(), events, feature_names)?;
    Ok(SimulatedDataset {
        data,
        clusters,
        true_times: times,
        params,
    })
}

/// Synthetic Gaussian covariates followed by [`generate`].
pub fn generate_synthetic(n: usize, d: usize, cfg: &SimConfig) -> Result<SimulatedDataset> {
    let names = (0..d).map(|j| format!("x{j}")).collect();
    generate(synthetic_features(n, d, cfg.seed), names, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSidecar {
    pub config: SimConfig,
    pub seed: u64,
    pub beta0: Vec<f64>,
    pub beta1: Vec<f64>,
    pub clusters: Vec<u8>,
}

/// Writes the data as CSV (`time`, `event` last) plus a matching schema
/// file and a JSON sidecar with the generating parameters.
pub fn write_simulation(sim: &SimulatedDataset, cfg: &SimConfig, csv_path: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    let mut header = sim.data.feature_names.clone();
    header.push("time".into());
    header.push("event".into());
    w.write_record(&header).map_err(|e| csv_error(csv_path, e))?;
    for i in 0..sim.data.n_rows() {
        let mut rec: Vec<String> = sim.data.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", sim.data.times[i]));
        rec.push(u8::from(sim.data.events[i]).to_string());
        w.write_record(&rec).map_err(|e| csv_error(csv_path, e))?;
    }
    w.flush().map_err(|e| SurvError::io(csv_path, e))?;

    let mut columns = std::collections::BTreeMap::new();
    for name in &sim.data.feature_names {
        columns.insert(name.clone(), ColumnRole::Numeric);
    }
    columns.insert("time".into(), ColumnRole::Time);
    columns.insert("event".into(), ColumnRole::Event);
    let schema = Schema {
        columns,
        missing: vec![String::new()],
    };
    let schema_path = csv_path.with_extension("schema.json");
    write_json(&schema_path, &schema)?;

    let sidecar = SimulationSidecar {
        config: *cfg,
        seed: cfg.seed,
        beta0: sim.params[0].beta.clone(),
        beta1: sim.params[1].beta.clone(),
        clusters: sim.clusters.clone(),
    };
    let sidecar_path = csv_path.with_extension("sim.json");
    write_json(&sidecar_path, &sidecar)?;
    Ok((schema_path, sidecar_path))
}

fn csv_error(path: &Path, e: csv::Error) -> SurvError {
    SurvError::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| SurvError::io(path, e))
}
