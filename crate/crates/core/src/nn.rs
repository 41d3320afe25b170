//! Dense network building blocks with hand-written backward passes.
//!
//! Every parameter lives in a [`ParameterStore`] and is addressed by a
//! [`ParamId`]; layers only hold ids. Backward passes accumulate into the
//! store's gradient buffers, which [`adam_step`] consumes and clears.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    params: Vec<Param>,
    pub rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore {
            params: Vec::new(),
            rng_seed,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let grad = Array2::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].grad
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Parameter values only, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Array2<f64>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(SurvError::Shape("snapshot does not match parameter store".into()));
        }
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            if p.value.dim() != v.dim() {
                return Err(SurvError::Shape(format!("snapshot shape mismatch for '{}'", p.name)));
            }
            p.value.assign(v);
        }
        Ok(())
    }

    fn scalar_mut(&mut self, coord: (usize, usize)) -> &mut f64 {
        let p = &mut self.params[coord.0].value;
        let cols = p.ncols();
        &mut p[[coord.1 / cols, coord.1 % cols]]
    }

    fn grad_scalar(&self, coord: (usize, usize)) -> f64 {
        let g = &self.params[coord.0].grad;
        g[[coord.1 / g.ncols(), coord.1 % g.ncols()]]
    }
}

/// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearCache {
    pub x: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub grad_x: Array2<f64>,
    pub grad_w: Array2<f64>,
    pub grad_bias: Array2<f64>,
}

/// `y = x W + bias`, where `bias` has shape `1 x out`.
pub fn linear_forward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    bias: ArrayView2<f64>,
) -> Result<(Array2<f64>, LinearCache)> {
    if x.ncols() != w.nrows() || bias.dim() != (1, w.ncols()) {
        return Err(SurvError::Shape(format!(
            "linear: x {:?}, W {:?}, bias {:?}",
            x.dim(),
            w.dim(),
            bias.dim()
        )));
    }
    let y = x.dot(&w) + &bias;
    Ok((y, LinearCache { x: x.to_owned() }))
}

pub fn linear_backward(grad_out: ArrayView2<f64>, cache: &LinearCache, w: ArrayView2<f64>) -> Result<LinearGrads> {
    if grad_out.dim() != (cache.x.nrows(), w.ncols()) || cache.x.ncols() != w.nrows() {
        return Err(SurvError::Shape(format!(
            "linear backward: grad_out {:?}, x {:?}, W {:?}",
            grad_out.dim(),
            cache.x.dim(),
            w.dim()
        )));
    }
    Ok(LinearGrads {
        grad_x: grad_out.dot(&w.t()),
        grad_w: cache.x.t().dot(&grad_out),
        grad_bias: grad_out.sum_axis(Axis(0)).insert_axis(Axis(0)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = init_uniform(in_dim, out_dim, in_dim, rng);
        let b = init_uniform(1, out_dim, in_dim, rng);
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParameterStore, x: ArrayView2<f64>) -> Result<(Array2<f64>, LinearCache)> {
        linear_forward(x, store.value(self.weight).view(), store.value(self.bias).view())
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParameterStore, cache: &LinearCache, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        let g = linear_backward(grad_out, cache, store.value(self.weight).view())?;
        *store.grad_mut(self.weight) += &g.grad_w;
        *store.grad_mut(self.bias) += &g.grad_bias;
        Ok(g.grad_x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
    Selu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
        }
    }

    /// Derivative at `x`; the ReLU derivative at 0 is taken as 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
        }
    }

    pub fn forward(self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| self.apply(v))
    }

    /// `x` is the pre-activation input saved from the forward pass.
    pub fn backward(self, x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
        let mut g = grad_out.clone();
        g.zip_mut_with(x, |g, &v| *g *= self.derivative(v));
        g
    }
}

impl FromStr for Activation {
    type Err = SurvError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            "selu" => Ok(Activation::Selu),
            other => Err(SurvError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Selu => "selu",
        };
        f.write_str(s)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`, linear above 35 where the correction is below 1e-15.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 35.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / sum).collect()
}

/// Gradient w.r.t. logits given softmax output `probs` and `dL/dprobs`.
pub fn softmax_backward(probs: ArrayView2<f64>, grad_probs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(grad_probs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for ((o, &p), &g) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = p * (g - dot);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-row normalization to zero mean and unit variance (before the affine
/// gain/shift).
pub fn layer_norm_normalize(x: ArrayView2<f64>) -> LayerNormCache {
    let d = x.ncols() as f64;
    let mut normalized = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normalized.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    LayerNormCache { normalized, inv_std }
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            shift: store.add(format!("{name}.shift"), Array2::zeros((1, dim))),
            dim,
        }
    }

    pub fn forward(&self, store: &ParameterStore, x: ArrayView2<f64>) -> Result<(Array2<f64>, LayerNormCache)> {
        if x.ncols() != self.dim {
            return Err(SurvError::Shape(format!("layer norm expects {} columns, got {}", self.dim, x.ncols())));
        }
        let cache = layer_norm_normalize(x);
        let y = &cache.normalized * store.value(self.gain) + store.value(self.shift);
        Ok((y, cache))
    }

    pub fn backward(&self, store: &mut ParameterStore, cache: &LayerNormCache, grad_out: ArrayView2<f64>) -> Array2<f64> {
        let gain = store.value(self.gain).clone();
        let grad_gain = (&grad_out * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        let grad_shift = grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        *store.grad_mut(self.gain) += &grad_gain;
        *store.grad_mut(self.shift) += &grad_shift;

        let d = self.dim as f64;
        let g_hat = &grad_out * &gain;
        let mut grad_x = Array2::zeros(grad_out.raw_dim());
        for (i, mut row) in grad_x.rows_mut().into_iter().enumerate() {
            let gh = g_hat.row(i);
            let xh = cache.normalized.row(i);
            let mean_g = gh.sum() / d;
            let mean_gx = gh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            for j in 0..row.len() {
                row[j] = cache.inv_std[i] * (gh[j] - mean_g - xh[j] * mean_gx);
            }
        }
        grad_x
    }
}

/// Inverted dropout. Returns the output and the scaled keep-mask, which is
/// also the elementwise Jacobian used by [`dropout_backward`].
pub fn dropout_forward(x: &Array2<f64>, rate: f64, training: bool, rng: &mut impl Rng) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(SurvError::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = 1.0 / (1.0 - rate);
    let mask = Array2::from_shape_fn(x.raw_dim(), |_| if rng.random::<f64>() < rate { 0.0 } else { scale });
    Ok((x * &mask, Some(mask)))
}

pub fn dropout_backward(grad_out: &Array2<f64>, mask: Option<&Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => grad_out * m,
        None => grad_out.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Array2<f64>> = store.params().iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        AdamState {
            config,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }
}

/// One bias-corrected Adam update; gradients are zeroed afterwards. A
/// non-finite gradient aborts before any parameter changes.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    if state.first.len() != store.len() {
        return Err(SurvError::Shape("optimizer state does not match parameter store".into()));
    }
    if let Some(p) = store.params().iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(SurvError::NonFiniteGradient(p.name.clone()));
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for ((p, m), v) in store.params_mut().iter_mut().zip(&mut state.first).zip(&mut state.second) {
        ndarray::Zip::from(&mut p.value)
            .and(&mut p.grad)
            .and(m)
            .and(v)
            .for_each(|w, g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * *g;
                *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                *g = 0.0;
            });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the gradients currently stored in `store` against central
/// finite differences of `loss_fn` on at most 200 random coordinates.
/// Parameter values are restored before returning.
pub fn gradient_check(
    loss_fn: &mut dyn FnMut(&ParameterStore) -> f64,
    store: &mut ParameterStore,
    h: f64,
    tol: f64,
    seed: u64,
) -> GradCheckReport {
    let coords: Vec<(usize, usize)> = store
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.value.len()).map(move |j| (i, j)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= 200 {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, coords.len(), 200).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|k| coords[k]).collect()
    };

    let mut max_rel_error = 0.0_f64;
    let mut worst = None;
    for &coord in &chosen {
        let analytic = store.grad_scalar(coord);
        let orig = *store.scalar_mut(coord);
        *store.scalar_mut(coord) = orig + h;
        let plus = loss_fn(store);
        *store.scalar_mut(coord) = orig - h;
        let minus = loss_fn(store);
        *store.scalar_mut(coord) = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if !(rel <= max_rel_error) {
            max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            worst = Some((store.params()[coord.0].name.clone(), coord.1));
        }
    }
    GradCheckReport {
        coordinates: chosen.len(),
        max_rel_error,
        worst,
        passed: max_rel_error < tol,
    }
}
