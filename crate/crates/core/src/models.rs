//! Embeddings, MLP backbones, the shared-embedding ensemble and the four
//! survival heads.
//!
//! | head | member output | inference                                   |
//! |------|---------------|---------------------------------------------|
//! | LS   | m logits      | softmax, single member                      |
//! | LAS  | m logits      | mean of member logits, then softmax         |
//! | WSA  | (λ, k)        | mean of member survival curves              |
//! | WAS  | (λ, k)        | mean of member λ and of member k, one curve |
//!
//! Members are trained on independent losses; only the numerical
//! embedding is shared.

use std::fmt;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureKind, SurvivalDataset};
use crate::error::{Result, SurvError};
use crate::nn::{
    dropout_backward, dropout_forward, softmax, softmax_backward, softplus, softplus_grad,
    softplus_inverse, Activation, LayerNorm, LayerNormCache, Linear, LinearCache, ParamId,
    ParameterStore,
};
use crate::survhl::{survhl_batch, SurvHLConfig};
use crate::timegrid::{probs_to_survival, DiscreteSurvival, TimeGrid};

/// Lower bound added to softplus outputs for Weibull parameters.
pub const WEIBULL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "LAS")]
    Las,
    #[serde(rename = "WSA")]
    Wsa,
    #[serde(rename = "WAS")]
    Was,
}

impl HeadKind {
    pub fn is_weibull(self) -> bool {
        matches!(self, HeadKind::Wsa | HeadKind::Was)
    }

    /// Raw outputs per member for a grid with `m` bins.
    pub fn output_width(self, m: usize) -> usize {
        if self.is_weibull() {
            2
        } else {
            m
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Ls => "LS",
            HeadKind::Las => "LAS",
            HeadKind::Wsa => "WSA",
            HeadKind::Was => "WAS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullParams {
    pub scale: f64,
    pub shape: f64,
}

impl WeibullParams {
    pub fn new(scale: f64, shape: f64) -> Result<Self> {
        if !(scale.is_finite() && shape.is_finite() && scale >= WEIBULL_FLOOR && shape >= WEIBULL_FLOOR) {
            return Err(SurvError::Validation(format!(
                "invalid Weibull parameters scale={scale}, shape={shape}"
            )));
        }
        Ok(WeibullParams { scale, shape })
    }

    pub fn cdf(&self, t: f64) -> f64 {
        -(-(t / self.scale).powf(self.shape)).exp_m1()
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-(t / self.scale).powf(self.shape)).exp()
    }
}

/// Bin probabilities of a Weibull law on the grid. Bin `i` covers
/// `[tau_i, tau_{i+1})`, the last bin is open, and the mass below `tau_1`
/// is folded into bin 1, so `S_i = 1 - F(tau_{i+1})` and `S_m = 0`.
pub fn weibull_discretize(params: &WeibullParams, grid: &TimeGrid) -> Result<DiscreteSurvival> {
    let taus = grid.taus();
    let m = taus.len();
    // z_j = (tau_j / scale)^shape for j = 2..m (index 0 unused)
    let z: Vec<f64> = taus.iter().map(|t| (t / params.scale).powf(params.shape)).collect();
    if z.iter().any(|v| v.is_nan()) {
        return Err(SurvError::Validation(format!("non-finite Weibull CDF for {params:?}")));
    }
    let mut probs = vec![0.0; m];
    let mut survival = vec![0.0; m];
    probs[0] = -(-z[1]).exp_m1();
    for i in 1..m - 1 {
        let s_here = (-z[i]).exp();
        probs[i] = s_here * -(-(z[i + 1] - z[i])).exp_m1();
    }
    probs[m - 1] = (-z[m - 1]).exp();
    for i in 0..m - 1 {
        survival[i] = (-z[i + 1]).exp();
    }
    Ok(DiscreteSurvival { probs, survival })
}

/// Maps a raw member output pair to Weibull parameters; `time_scale`
/// converts the normalized scale back to data time units.
pub fn weibull_from_raw(raw_scale: f64, raw_shape: f64, time_scale: f64) -> WeibullParams {
    WeibullParams {
        scale: time_scale * (softplus(raw_scale) + WEIBULL_FLOOR),
        shape: softplus(raw_shape) + WEIBULL_FLOOR,
    }
}

/// Gradient of `sum_i g_i p_i` w.r.t. the raw pair, through the folded
/// discretization and the softplus maps.
pub fn weibull_raw_backward(raw_scale: f64, raw_shape: f64, time_scale: f64, grid: &TimeGrid, grad_probs: &[f64]) -> (f64, f64) {
    let params = weibull_from_raw(raw_scale, raw_shape, time_scale);
    let lam = params.scale;
    let k = params.shape;
    let taus = grid.taus();
    let m = taus.len();
    // dS_W(tau)/dlambda and dS_W(tau)/dk for tau = tau_j
    let dsw = |t: f64| -> (f64, f64) {
        let ratio = t / lam;
        let z = ratio.powf(k);
        if !(z < 700.0) {
            return (0.0, 0.0);
        }
        let sz = (-z).exp() * z;
        (sz * k / lam, -sz * ratio.ln())
    };
    // p_1 = 1 - S(tau_2); p_i = S(tau_i) - S(tau_{i+1}); p_m = S(tau_m)
    // so tau_j (j >= 2) enters p_{j-1} with sign -1 and p_j with sign +1.
    let mut d_lam = 0.0;
    let mut d_k = 0.0;
    for j in 1..m {
        let coef = grad_probs[j] - grad_probs[j - 1];
        if coef == 0.0 {
            continue;
        }
        let (dl, dk) = dsw(taus[j]);
        d_lam += coef * dl;
        d_k += coef * dk;
    }
    (
        d_lam * time_scale * softplus_grad(raw_scale),
        d_k * softplus_grad(raw_shape),
    )
}

pub fn curve_from_logits(logits: &[f64]) -> Result<DiscreteSurvival> {
    probs_to_survival(&crate::nn::softmax_row(logits))
}

/// Evenly spaced empirical quantiles with duplicates removed. Degenerate
/// columns get a unit-width interval around their value.
pub fn fit_bin_edges(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() || bins == 0 {
        return Err(SurvError::Config("bin edges need values and at least one bin".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (0..=bins)
        .map(|b| {
            let pos = b as f64 * (n - 1) as f64 / bins as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect();
    edges.dedup_by(|a, b| *a <= *b);
    if edges.len() < 2 {
        let v = sorted[0];
        edges = vec![v - 0.5, v + 0.5];
    }
    Ok(edges)
}

/// Piecewise-linear encoding: component `b` is 1 above the bin, 0 below it
/// and the linear fraction inside it.
pub fn ple_encode(x: f64, edges: &[f64], out: &mut [f64]) {
    for (b, slot) in out.iter_mut().enumerate() {
        let lo = edges[b];
        let hi = edges[b + 1];
        *slot = if x >= hi {
            1.0
        } else if x <= lo {
            0.0
        } else {
            (x - lo) / (hi - lo)
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub bins: usize,
    pub width: usize,
    pub activation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearEmbedding {
    pub edges: Vec<Vec<f64>>,
    pub width: usize,
    pub activation: bool,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    encodings: Vec<Array2<f64>>,
    pre_activation: Vec<Array2<f64>>,
}

impl PiecewiseLinearEmbedding {
    pub fn new(
        store: &mut ParameterStore,
        edges: Vec<Vec<f64>>,
        width: usize,
        activation: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if width == 0 {
            return Err(SurvError::Config("embedding width must be positive".into()));
        }
        let mut weights = Vec::with_capacity(edges.len());
        let mut biases = Vec::with_capacity(edges.len());
        for (f, e) in edges.iter().enumerate() {
            if e.len() < 2 || e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SurvError::Config(format!("bin edges of numeric feature {f} are not strictly increasing")));
            }
            let bins = e.len() - 1;
            weights.push(store.add(format!("embedding.{f}.weight"), crate::nn::init_uniform(bins, width, bins, rng)));
            biases.push(store.add(format!("embedding.{f}.bias"), crate::nn::init_uniform(1, width, bins, rng)));
        }
        Ok(PiecewiseLinearEmbedding {
            edges,
            width,
            activation,
            weights,
            biases,
        })
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    pub fn output_width(&self) -> usize {
        self.edges.len() * self.width
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        if self.edges.is_empty() {
            return Err(SurvError::Config("embedding has no fitted bin edges".into()));
        }
        if x.ncols() != self.edges.len() {
            return Err(SurvError::Shape(format!(
                "embedding expects {} numeric columns, got {}",
                self.edges.len(),
                x.ncols()
            )));
        }
        Ok(self
            .edges
            .iter()
            .enumerate()
            .map(|(f, e)| {
                let mut enc = Array2::zeros((x.nrows(), e.len() - 1));
                for (i, mut row) in enc.rows_mut().into_iter().enumerate() {
                    ple_encode(x[[i, f]], e, row.as_slice_mut().expect("row-major"));
                }
                enc
            })
            .collect())
    }

    pub fn forward(&self, store: &ParameterStore, x: ArrayView2<f64>) -> Result<(Array2<f64>, EmbeddingCache)> {
        let encodings = self.encode(x)?;
        let mut out = Array2::zeros((x.nrows(), self.output_width()));
        let mut pre_activation = Vec::with_capacity(encodings.len());
        for (f, enc) in encodings.iter().enumerate() {
            let z = enc.dot(store.value(self.weights[f])) + store.value(self.biases[f]);
            let y = if self.activation { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            out.slice_mut(s![.., f * self.width..(f + 1) * self.width]).assign(&y);
            pre_activation.push(z);
        }
        Ok((
            out,
            EmbeddingCache {
                encodings,
                pre_activation,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParameterStore, cache: &EmbeddingCache, grad_out: ArrayView2<f64>) {
        for (f, enc) in cache.encodings.iter().enumerate() {
            let mut g = grad_out.slice(s![.., f * self.width..(f + 1) * self.width]).to_owned();
            if self.activation {
                g.zip_mut_with(&cache.pre_activation[f], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            *store.grad_mut(self.weights[f]) += &enc.t().dot(&g);
            *store.grad_mut(self.biases[f]) += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub n_blocks: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    linear: Linear,
    norm: Option<LayerNorm>,
}

/// Stacked blocks `linear -> [layer norm] -> activation -> [dropout]`
/// followed by an output linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    blocks: Vec<Block>,
    out: Linear,
    activation: Activation,
    dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct BlockCache {
    linear: LinearCache,
    norm: Option<LayerNormCache>,
    pre_activation: Array2<f64>,
    mask: Option<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    blocks: Vec<BlockCache>,
    out: LinearCache,
}

impl Mlp {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        spec: &BackboneSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(spec.n_blocks);
        let mut width = in_dim;
        for b in 0..spec.n_blocks {
            let linear = Linear::new(store, &format!("{name}.block{b}.linear"), width, spec.hidden, rng);
            let norm = spec
                .layer_norm
                .then(|| LayerNorm::new(store, &format!("{name}.block{b}.norm"), spec.hidden));
            blocks.push(Block { linear, norm });
            width = spec.hidden;
        }
        let out = Linear::new(store, &format!("{name}.out"), width, out_dim, rng);
        Mlp {
            blocks,
            out,
            activation: spec.activation,
            dropout: spec.dropout,
        }
    }

    pub fn output_layer(&self) -> Linear {
        self.out
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        x: ArrayView2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, MlpCache)> {
        let training = rng.is_some();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let rng = match rng {
            Some(r) => r,
            None => &mut dummy,
        };
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (z, linear) = block.linear.forward(store, h.view())?;
            let (z, norm) = match &block.norm {
                Some(ln) => {
                    let (y, c) = ln.forward(store, z.view())?;
                    (y, Some(c))
                }
                None => (z, None),
            };
            let a = self.activation.forward(&z);
            let (a, mask) = dropout_forward(&a, self.dropout, training, rng)?;
            caches.push(BlockCache {
                linear,
                norm,
                pre_activation: z,
                mask,
            });
            h = a;
        }
        let (y, out) = self.out.forward(store, h.view())?;
        Ok((y, MlpCache { blocks: caches, out }))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&self, store: &mut ParameterStore, cache: &MlpCache, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut g = self.out.backward(store, &cache.out, grad_out)?;
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let gd = dropout_backward(&g, bc.mask.as_ref());
            let ga = self.activation.backward(&bc.pre_activation, &gd);
            let gn = match (&block.norm, &bc.norm) {
                (Some(ln), Some(c)) => ln.backward(store, c, ga.view()),
                _ => ga,
            };
            g = block.linear.backward(store, &bc.linear, gn.view())?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub head: HeadKind,
    pub n_members: usize,
    pub backbone: BackboneSpec,
    pub embedding: Option<EmbeddingSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 {
            return Err(SurvError::Config("ensemble needs at least one member".into()));
        }
        if self.head == HeadKind::Ls && self.n_members != 1 {
            return Err(SurvError::Config("LS head implies a single member".into()));
        }
        if self.backbone.hidden == 0 {
            return Err(SurvError::Config("hidden width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.backbone.dropout) {
            return Err(SurvError::Config(format!("dropout must be in [0, 1), got {}", self.backbone.dropout)));
        }
        if let Some(e) = &self.embedding {
            if e.bins == 0 || e.width == 0 {
                return Err(SurvError::Config("embedding bins and width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A shared numerical embedding feeding `n_members` independent backbones.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalNet {
    pub spec: ModelSpec,
    pub store: ParameterStore,
    pub embedding: Option<PiecewiseLinearEmbedding>,
    /// Columns routed through the embedding (empty without one).
    pub numeric_cols: Vec<usize>,
    /// Columns concatenated as-is after the embedded block.
    pub passthrough_cols: Vec<usize>,
    pub members: Vec<Mlp>,
    pub n_inputs: usize,
    pub n_bins: usize,
    pub out_dim: usize,
    /// Weibull scales are predicted in units of this time.
    pub time_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    embedding: Option<EmbeddingCache>,
    members: Vec<MlpCache>,
}

/// Input routing and embedding edges; everything needed besides the
/// parameters to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetLayout {
    pub n_inputs: usize,
    pub numeric_cols: Vec<usize>,
    pub passthrough_cols: Vec<usize>,
    pub edges: Vec<Vec<f64>>,
    pub n_bins: usize,
}

impl NetLayout {
    /// Routes numeric columns through the embedding (when enabled) with
    /// quantile edges from `train`.
    pub fn fit(spec: &ModelSpec, train: &SurvivalDataset, grid: &TimeGrid) -> Result<Self> {
        let d = train.n_features();
        let (numeric_cols, passthrough_cols, edges) = match spec.embedding {
            Some(e) => {
                let numeric: Vec<usize> = (0..d).filter(|&j| train.feature_kinds[j] == FeatureKind::Numeric).collect();
                let other = (0..d).filter(|&j| train.feature_kinds[j] != FeatureKind::Numeric).collect();
                let edges = numeric
                    .iter()
                    .map(|&j| fit_bin_edges(&train.features.column(j).to_vec(), e.bins))
                    .collect::<Result<Vec<_>>>()?;
                (numeric, other, edges)
            }
            None => (Vec::new(), (0..d).collect(), Vec::new()),
        };
        Ok(NetLayout {
            n_inputs: d,
            numeric_cols,
            passthrough_cols,
            edges,
            n_bins: grid.len(),
        })
    }
}

impl SurvivalNet {
    /// Builds and initializes a network for `train`'s feature layout.
    /// Embedding bin edges are quantiles of the training columns.
    pub fn new(spec: ModelSpec, train: &SurvivalDataset, grid: &TimeGrid, time_scale: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = NetLayout::fit(&spec, train, grid)?;
        Self::build(spec, layout, time_scale, seed)
    }

    pub fn build(spec: ModelSpec, layout: NetLayout, time_scale: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !(time_scale.is_finite() && time_scale > 0.0) {
            return Err(SurvError::Config(format!("time scale must be positive, got {time_scale}")));
        }
        if layout.n_bins < 2 {
            return Err(SurvError::Grid(format!("need at least 2 bins, got {}", layout.n_bins)));
        }
        if layout.numeric_cols.len() != layout.edges.len()
            || layout.numeric_cols.iter().chain(&layout.passthrough_cols).any(|&j| j >= layout.n_inputs)
        {
            return Err(SurvError::Config("inconsistent input layout".into()));
        }
        let mut store = ParameterStore::new(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = match spec.embedding {
            Some(e) if !layout.edges.is_empty() => Some(PiecewiseLinearEmbedding::new(
                &mut store,
                layout.edges.clone(),
                e.width,
                e.activation,
                &mut rng,
            )?),
            _ => None,
        };
        // numeric columns without an embedding are fed raw
        let (numeric_cols, passthrough_cols) = if embedding.is_some() {
            (layout.numeric_cols, layout.passthrough_cols)
        } else {
            let mut all: Vec<usize> = layout.numeric_cols.iter().chain(&layout.passthrough_cols).copied().collect();
            all.sort_unstable();
            (Vec::new(), all)
        };
        let embedded = embedding.as_ref().map_or(0, |e| e.output_width());
        let in_dim = embedded + passthrough_cols.len();
        if in_dim == 0 {
            return Err(SurvError::Config("model has no inputs".into()));
        }
        let out_dim = spec.head.output_width(layout.n_bins);
        let members: Vec<Mlp> = (0..spec.n_members)
            .map(|k| Mlp::new(&mut store, &format!("member{k}"), in_dim, out_dim, &spec.backbone, &mut rng))
            .collect();
        if spec.head.is_weibull() {
            // start every member at scale = time_scale, shape = 1
            let start = softplus_inverse(1.0 - WEIBULL_FLOOR);
            for m in &members {
                let bias = store.value_mut(m.output_layer().bias);
                bias[[0, 0]] += start;
                bias[[0, 1]] += start;
            }
        }
        Ok(SurvivalNet {
            spec,
            store,
            embedding,
            numeric_cols,
            passthrough_cols,
            members,
            n_inputs: layout.n_inputs,
            n_bins: layout.n_bins,
            out_dim,
            time_scale,
        })
    }

    pub fn layout(&self) -> NetLayout {
        NetLayout {
            n_inputs: self.n_inputs,
            numeric_cols: self.numeric_cols.clone(),
            passthrough_cols: self.passthrough_cols.clone(),
            edges: self.embedding.as_ref().map_or_else(Vec::new, |e| e.edges.clone()),
            n_bins: self.n_bins,
        }
    }

    pub fn head(&self) -> HeadKind {
        self.spec.head
    }

    fn check_inputs(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.n_inputs {
            return Err(SurvError::Shape(format!(
                "model expects {} features, got {}",
                self.n_inputs,
                x.ncols()
            )));
        }
        Ok(())
    }

    fn backbone_input(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Option<EmbeddingCache>)> {
        self.check_inputs(x)?;
        let passthrough = x.select(Axis(1), &self.passthrough_cols);
        match &self.embedding {
            Some(emb) => {
                let numeric = x.select(Axis(1), &self.numeric_cols);
                let (e, cache) = emb.forward(&self.store, numeric.view())?;
                let joined = ndarray::concatenate(Axis(1), &[e.view(), passthrough.view()])
                    .map_err(|err| SurvError::Shape(err.to_string()))?;
                Ok((joined, Some(cache)))
            }
            None => Ok((passthrough, None)),
        }
    }

    /// Raw per-member outputs. The embedding runs once per batch. Passing
    /// an RNG enables training mode (dropout).
    pub fn forward_members(&self, x: ArrayView2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> Result<(Vec<Array2<f64>>, ForwardCache)> {
        let (input, embedding) = self.backbone_input(x)?;
        let mut outputs = Vec::with_capacity(self.members.len());
        let mut members = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let (y, c) = m.forward(&self.store, input.view(), rng.as_deref_mut())?;
            outputs.push(y);
            members.push(c);
        }
        Ok((outputs, ForwardCache { embedding, members }))
    }

    /// Backpropagates per-member output gradients. Member input gradients
    /// are summed in member order before entering the shared embedding.
    pub fn backward_members(&mut self, cache: &ForwardCache, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != self.members.len() {
            return Err(SurvError::Shape(format!(
                "{} member gradients for {} members",
                grads.len(),
                self.members.len()
            )));
        }
        let mut input_grad: Option<Array2<f64>> = None;
        for ((m, c), g) in self.members.iter().zip(&cache.members).zip(grads) {
            let gi = m.backward(&mut self.store, c, g.view())?;
            match &mut input_grad {
                Some(acc) => *acc += &gi,
                None => input_grad = Some(gi),
            }
        }
        if let (Some(emb), Some(ec), Some(g)) = (&self.embedding, &cache.embedding, input_grad) {
            let width = emb.output_width();
            emb.backward(&mut self.store, ec, g.slice(s![.., ..width]));
        }
        Ok(())
    }

    /// Per-member curves used by the loss: softmax for logit heads,
    /// discretized Weibull for parametric heads.
    pub fn member_curves(&self, raw: &Array2<f64>, grid: &TimeGrid) -> Result<Vec<DiscreteSurvival>> {
        if self.spec.head.is_weibull() {
            raw.rows()
                .into_iter()
                .map(|r| weibull_discretize(&weibull_from_raw(r[0], r[1], self.time_scale), grid))
                .collect()
        } else {
            let p = softmax(raw.view());
            Ok(p.rows()
                .into_iter()
                .map(|row| {
                    let probs = row.to_vec();
                    let mut survival = vec![0.0; probs.len()];
                    let mut tail = 0.0;
                    for i in (0..probs.len() - 1).rev() {
                        tail += probs[i + 1];
                        survival[i] = tail.min(1.0);
                    }
                    DiscreteSurvival { probs, survival }
                })
                .collect())
        }
    }

    fn member_raw_grad(&self, raw: &Array2<f64>, curves: &[DiscreteSurvival], grad_probs: &[Vec<f64>], grid: &TimeGrid) -> Array2<f64> {
        if self.spec.head.is_weibull() {
            let mut g = Array2::zeros(raw.raw_dim());
            for (i, r) in raw.rows().into_iter().enumerate() {
                let (a, b) = weibull_raw_backward(r[0], r[1], self.time_scale, grid, &grad_probs[i]);
                g[[i, 0]] = a;
                g[[i, 1]] = b;
            }
            g
        } else {
            let m = grid.len();
            let probs = Array2::from_shape_fn((curves.len(), m), |(i, j)| curves[i].probs[j]);
            let gp = Array2::from_shape_fn((curves.len(), m), |(i, j)| grad_probs[i][j]);
            softmax_backward(probs.view(), gp.view())
        }
    }

    /// Sum over members of the mean SurvHL loss on the batch. With
    /// `backward`, gradients are accumulated into the store.
    pub fn batch_loss(
        &mut self,
        x: ArrayView2<f64>,
        idxs: &[usize],
        events: &[bool],
        grid: &TimeGrid,
        cfg: &SurvHLConfig,
        rng: Option<&mut ChaCha8Rng>,
        backward: bool,
    ) -> Result<f64> {
        let (raw, cache) = self.forward_members(x, rng)?;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(raw.len());
        for r in &raw {
            let curves = self.member_curves(r, grid)?;
            let loss = survhl_batch(&curves, idxs, events, cfg)?;
            total += loss.loss;
            if backward {
                grads.push(self.member_raw_grad(r, &curves, &loss.grad_probs, grid));
            }
        }
        if backward {
            self.backward_members(&cache, &grads)?;
        }
        Ok(total)
    }

    /// Weibull parameters per member (outer) and row (inner).
    pub fn member_weibull_params(&self, x: ArrayView2<f64>) -> Result<Vec<Vec<WeibullParams>>> {
        self.require_weibull("WSA/WAS")?;
        let (raw, _) = self.forward_members(x, None)?;
        Ok(raw
            .iter()
            .map(|r| {
                r.rows()
                    .into_iter()
                    .map(|row| weibull_from_raw(row[0], row[1], self.time_scale))
                    .collect()
            })
            .collect())
    }

    fn require_weibull(&self, requested: &str) -> Result<()> {
        if !self.spec.head.is_weibull() {
            return Err(SurvError::HeadMismatch {
                actual: self.spec.head.to_string(),
                requested: requested.into(),
            });
        }
        Ok(())
    }

    fn require_logits(&self, requested: &str) -> Result<()> {
        if self.spec.head.is_weibull() {
            return Err(SurvError::HeadMismatch {
                actual: self.spec.head.to_string(),
                requested: requested.into(),
            });
        }
        Ok(())
    }

    fn mean_member_logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (raw, _) = self.forward_members(x, None)?;
        let mut mean = Array2::zeros(raw[0].raw_dim());
        for r in &raw {
            mean += r;
        }
        mean /= raw.len() as f64;
        Ok(mean)
    }

    /// Softmax over a single member's logits.
    pub fn predict_ls(&self, x: ArrayView2<f64>, grid: &TimeGrid) -> Result<Vec<DiscreteSurvival>> {
        self.require_logits("LS")?;
        if self.members.len() != 1 {
            return Err(SurvError::HeadMismatch {
                actual: format!("{} with {} members", self.spec.head, self.members.len()),
                requested: "LS".into(),
            });
        }
        self.predict_las(x, grid)
    }

    pub fn predict_las(&self, x: ArrayView2<f64>, grid: &TimeGrid) -> Result<Vec<DiscreteSurvival>> {
        self.require_logits("LAS")?;
        check_width(self.out_dim, grid)?;
        let mean = self.mean_member_logits(x)?;
        mean.rows()
            .into_iter()
            .map(|r| curve_from_logits(r.as_slice().expect("row-major")))
            .collect()
    }

    pub fn predict_wsa(&self, x: ArrayView2<f64>, grid: &TimeGrid) -> Result<Vec<DiscreteSurvival>> {
        self.require_weibull("WSA")?;
        check_width(self.n_bins, grid)?;
        let params = self.member_weibull_params(x)?;
        (0..x.nrows())
            .map(|i| {
                let curves = params
                    .iter()
                    .map(|member| weibull_discretize(&member[i], grid))
                    .collect::<Result<Vec<_>>>()?;
                Ok(mean_curve(&curves))
            })
            .collect()
    }

    pub fn predict_was(&self, x: ArrayView2<f64>, grid: &TimeGrid) -> Result<Vec<DiscreteSurvival>> {
        self.require_weibull("WAS")?;
        check_width(self.n_bins, grid)?;
        let params = self.member_weibull_params(x)?;
        let k = params.len() as f64;
        (0..x.nrows())
            .map(|i| {
                let scale = params.iter().map(|m| m[i].scale).sum::<f64>() / k;
                let shape = params.iter().map(|m| m[i].shape).sum::<f64>() / k;
                weibull_discretize(&WeibullParams::new(scale, shape)?, grid)
            })
            .collect()
    }

    /// Prediction with the aggregation implied by the head.
    pub fn predict(&self, x: ArrayView2<f64>, grid: &TimeGrid) -> Result<Vec<DiscreteSurvival>> {
        match self.spec.head {
            HeadKind::Ls => self.predict_ls(x, grid),
            HeadKind::Las => self.predict_las(x, grid),
            HeadKind::Wsa => self.predict_wsa(x, grid),
            HeadKind::Was => self.predict_was(x, grid),
        }
    }
}

fn check_width(out_dim: usize, grid: &TimeGrid) -> Result<()> {
    if out_dim != grid.len() {
        return Err(SurvError::Shape(format!(
            "model was fitted on {} bins, grid has {}",
            out_dim,
            grid.len()
        )));
    }
    Ok(())
}

/// Pointwise mean of curves (a mixture of the member distributions).
pub fn mean_curve(curves: &[DiscreteSurvival]) -> DiscreteSurvival {
    let m = curves[0].len();
    let k = curves.len() as f64;
    let mut probs = vec![0.0; m];
    let mut survival = vec![0.0; m];
    for c in curves {
        for j in 0..m {
            probs[j] += c.probs[j];
            survival[j] += c.survival[j];
        }
    }
    probs.iter_mut().for_each(|v| *v /= k);
    survival.iter_mut().for_each(|v| *v /= k);
    DiscreteSurvival { probs, survival }
}
