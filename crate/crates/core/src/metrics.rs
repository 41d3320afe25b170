//! Kaplan–Meier estimation and censoring-aware evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};
use crate::timegrid::{survival_at, DiscreteSurvival, TimeGrid};

/// Right-continuous step function with value `initial` before the first
/// jump time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub initial: f64,
}

impl StepFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>, initial: f64) -> Result<Self> {
        if times.len() != values.len() {
            return Err(SurvError::Shape(format!("{} jump times, {} values", times.len(), values.len())));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SurvError::Validation("step function times must be strictly increasing".into()));
        }
        Ok(StepFunction { times, values, initial })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    /// Left limit `f(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }
}

/// Product-limit estimator. Pass flipped indicators to estimate the
/// censoring distribution.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction> {
    if times.is_empty() {
        return Err(SurvError::Metric("Kaplan-Meier needs at least one observation".into()));
    }
    check_lengths(times.len(), events.len())?;
    if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(SurvError::Validation("Kaplan-Meier times must be finite and positive".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0usize;
        let mut n_here = 0usize;
        while k < order.len() && times[order[k]] == t {
            d += usize::from(events[order[k]]);
            n_here += 1;
            k += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            jump_times.push(t);
            values.push(s);
        }
        at_risk -= n_here;
    }
    StepFunction::new(jump_times, values, 1.0)
}

/// Mean event time with left-endpoint bin representatives.
pub fn expected_time(curve: &DiscreteSurvival, grid: &TimeGrid) -> f64 {
    curve.probs.iter().zip(grid.taus()).map(|(p, t)| p * t).sum()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(SurvError::Shape(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// Concordant pairs count 2, prediction ties 1; `cindex = score / (2 * pairs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub score: u64,
    pub pairs: u64,
}

impl PairCounts {
    pub fn cindex(self) -> Result<f64> {
        if self.pairs == 0 {
            return Err(SurvError::Metric("no comparable pairs".into()));
        }
        Ok(self.score as f64 / (2 * self.pairs) as f64)
    }
}

/// O(n^2) enumeration over pairs with `events[i]` and `times[i] < times[j]`.
pub fn harrell_pairs_reference(predicted: &[f64], times: &[f64], events: &[bool]) -> PairCounts {
    let mut score = 0u64;
    let mut pairs = 0u64;
    for i in 0..times.len() {
        if !events[i] {
            continue;
        }
        for j in 0..times.len() {
            if times[i] < times[j] {
                pairs += 1;
                if predicted[i] < predicted[j] {
                    score += 2;
                } else if predicted[i] == predicted[j] {
                    score += 1;
                }
            }
        }
    }
    PairCounts { score, pairs }
}

/// O(n log n) pair counting with a Fenwick tree over prediction ranks.
pub fn harrell_pairs_fast(predicted: &[f64], times: &[f64], events: &[bool]) -> PairCounts {
    let n = times.len();
    let mut sorted_pred: Vec<f64> = predicted.to_vec();
    sorted_pred.sort_by(f64::total_cmp);
    sorted_pred.dedup();
    let rank = |v: f64| sorted_pred.partition_point(|&x| x < v) + 1;
    let mut tree = vec![0u64; sorted_pred.len() + 1];
    let add = |tree: &mut Vec<u64>, mut i: usize| {
        while i < tree.len() {
            tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    };
    let prefix = |tree: &Vec<u64>, mut i: usize| {
        let mut s = 0;
        while i > 0 {
            s += tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut inserted = 0u64;
    let mut score = 0u64;
    let mut pairs = 0u64;
    let mut k = 0;
    while k < n {
        let t = times[order[k]];
        let end = k + order[k..].iter().take_while(|&&i| times[i] == t).count();
        for &i in &order[k..end] {
            if events[i] {
                let r = rank(predicted[i]);
                let le = prefix(&tree, r);
                let lt = prefix(&tree, r - 1);
                let greater = inserted - le;
                pairs += inserted;
                score += 2 * greater + (le - lt);
            }
        }
        for &i in &order[k..end] {
            add(&mut tree, rank(predicted[i]));
            inserted += 1;
        }
        k = end;
    }
    PairCounts { score, pairs }
}

/// Harrell's C-index over predicted event times; ties score one half.
pub fn harrell_cindex(predicted: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_lengths(predicted.len(), times.len())?;
    check_lengths(times.len(), events.len())?;
    if predicted.iter().any(|p| p.is_nan()) {
        return Err(SurvError::Metric("NaN predicted time".into()));
    }
    harrell_pairs_fast(predicted, times, events).cindex()
}

/// IPCW Brier score at time `t` with censoring survival `g`.
pub fn brier_score(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
    t: f64,
) -> Result<f64> {
    check_lengths(curves.len(), times.len())?;
    check_lengths(times.len(), events.len())?;
    if times.is_empty() {
        return Err(SurvError::Metric("Brier score on empty data".into()));
    }
    let g_t = g.eval(t);
    if g_t <= 0.0 {
        return Err(SurvError::CensoringExhausted(t));
    }
    let mut total = 0.0;
    for ((curve, &ti), &ei) in curves.iter().zip(times).zip(events) {
        let s = survival_at(curve, grid, t);
        if ti <= t {
            if ei {
                let w = g.eval_left(ti);
                if w <= 0.0 {
                    return Err(SurvError::CensoringExhausted(ti));
                }
                total += s * s / w;
            }
        } else {
            total += (1.0 - s) * (1.0 - s) / g_t;
        }
    }
    Ok(total / times.len() as f64)
}

/// Largest uncensored time at which the censoring survival is positive.
pub fn brier_horizon(times: &[f64], events: &[bool], g: &StepFunction) -> Result<f64> {
    times
        .iter()
        .zip(events)
        .filter(|(t, e)| **e && g.eval(**t) > 0.0)
        .map(|(t, _)| *t)
        .max_by(f64::total_cmp)
        .ok_or_else(|| SurvError::Metric("no uncensored time with positive censoring survival".into()))
}

/// Evaluation points for the integrated Brier score: grid points up to
/// `t_max`, plus `t_max` itself.
pub fn brier_points(grid: &TimeGrid, t_max: f64) -> Vec<f64> {
    let mut pts: Vec<f64> = grid.taus().iter().copied().filter(|&t| t <= t_max).collect();
    if pts.last() != Some(&t_max) {
        pts.push(t_max);
    }
    pts
}

/// Trapezoidal mean of `brier_score` over the evaluation points, normalized
/// by the length of the integration range.
pub fn integrated_brier(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
) -> Result<f64> {
    let t_max = brier_horizon(times, events, g)?;
    let pts = brier_points(grid, t_max);
    integrated_brier_at(curves, grid, times, events, g, &pts)
}

pub fn integrated_brier_at(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
    points: &[f64],
) -> Result<f64> {
    if points.len() < 2 {
        return Err(SurvError::Metric(format!(
            "integrated Brier score needs at least 2 evaluation points, got {}",
            points.len()
        )));
    }
    let scores = points
        .iter()
        .map(|&t| brier_score(curves, grid, times, events, g, t))
        .collect::<Result<Vec<_>>>()?;
    let mut area = 0.0;
    for k in 1..points.len() {
        area += 0.5 * (scores[k] + scores[k - 1]) * (points[k] - points[k - 1]);
    }
    Ok(area / (points[points.len() - 1] - points[0]))
}

/// Linear-interpolation percentile (`q` in [0, 100]) of a nonempty sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// 10th, 20th, ..., 90th percentiles of the uncensored times.
pub fn default_auc_times(times: &[f64], events: &[bool]) -> Result<Vec<f64>> {
    let observed: Vec<f64> = times.iter().zip(events).filter(|(_, e)| **e).map(|(t, _)| *t).collect();
    if observed.is_empty() {
        return Err(SurvError::Metric("no uncensored times for AUC evaluation".into()));
    }
    let mut pts: Vec<f64> = (1..=9).map(|d| percentile(&observed, 10.0 * d as f64)).collect();
    pts.dedup();
    Ok(pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// `(t, AUC(t))` for every evaluation time that had cases and controls.
    pub per_time: Vec<(f64, f64)>,
    pub skipped: Vec<f64>,
    pub integrated: f64,
}

/// Cumulative/dynamic AUC with risk `1 - S(t|x)` and case weights
/// `1 / G(t_i-)`.
pub fn cumulative_dynamic_auc(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
    eval_times: &[f64],
) -> Result<AucResult> {
    check_lengths(curves.len(), times.len())?;
    check_lengths(times.len(), events.len())?;
    let mut per_time = Vec::new();
    let mut skipped = Vec::new();
    for &t in eval_times {
        match auc_at(curves, grid, times, events, g, t) {
            Some(a) => per_time.push((t, a)),
            None => {
                log::warn!("AUC at t={t} skipped: no weighted case/control pair");
                skipped.push(t);
            }
        }
    }
    if per_time.is_empty() {
        return Err(SurvError::Metric("AUC undefined at every evaluation time".into()));
    }
    let integrated = per_time.iter().map(|(_, a)| a).sum::<f64>() / per_time.len() as f64;
    Ok(AucResult {
        per_time,
        skipped,
        integrated,
    })
}

fn auc_at(curves: &[DiscreteSurvival], grid: &TimeGrid, times: &[f64], events: &[bool], g: &StepFunction, t: f64) -> Option<f64> {
    let risk = |i: usize| 1.0 - survival_at(&curves[i], grid, t);
    let mut controls: Vec<f64> = (0..times.len()).filter(|&j| times[j] > t).map(risk).collect();
    if controls.is_empty() {
        return None;
    }
    controls.sort_by(f64::total_cmp);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..times.len() {
        if !(events[i] && times[i] <= t) {
            continue;
        }
        let gi = g.eval_left(times[i]);
        if gi <= 0.0 {
            continue;
        }
        let w = 1.0 / gi;
        let r = risk(i);
        let below = controls.partition_point(|&c| c < r);
        let equal = controls.partition_point(|&c| c <= r) - below;
        num += w * (below as f64 + 0.5 * equal as f64);
        den += w;
    }
    if den == 0.0 {
        return None;
    }
    Some(num / (den * controls.len() as f64))
}

/// Max absolute difference on the grid between the CDF of the mean bin
/// probabilities and the empirical CDF of `observed`.
pub fn ks_statistic(curves: &[DiscreteSurvival], grid: &TimeGrid, observed: &[f64]) -> Result<f64> {
    if curves.is_empty() || observed.is_empty() {
        return Err(SurvError::Metric("KS statistic needs curves and observed times".into()));
    }
    let m = grid.len();
    if curves.iter().any(|c| c.len() != m) {
        return Err(SurvError::Shape("curve length differs from grid".into()));
    }
    let mut mean = vec![0.0; m];
    for c in curves {
        for (a, p) in mean.iter_mut().zip(&c.probs) {
            *a += p;
        }
    }
    let mut sorted = observed.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = curves.len() as f64;
    let mut model_cdf = 0.0;
    let mut worst: f64 = 0.0;
    for (j, &tau) in grid.taus().iter().enumerate() {
        model_cdf += mean[j] / n;
        let emp = sorted.partition_point(|&t| t <= tau) as f64 / sorted.len() as f64;
        worst = worst.max((model_cdf.min(1.0) - emp).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    /// Rank of each model in each run, `ranks[model][run]`.
    pub ranks: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Ranks models within each run (1 = best, ties share the mean rank) and
/// summarizes them across runs with population standard deviation.
pub fn rank_models(values: &[Vec<f64>], direction: Direction) -> Result<RankSummary> {
    if values.is_empty() {
        return Err(SurvError::Metric("no models to rank".into()));
    }
    let runs = values[0].len();
    if runs == 0 || values.iter().any(|v| v.len() != runs) {
        return Err(SurvError::Metric("every model needs the same nonzero number of runs".into()));
    }
    let n_models = values.len();
    let mut ranks = vec![vec![0.0; runs]; n_models];
    for r in 0..runs {
        let key = |m: usize| match direction {
            Direction::HigherIsBetter => -values[m][r],
            Direction::LowerIsBetter => values[m][r],
        };
        let mut order: Vec<usize> = (0..n_models).collect();
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)));
        let mut k = 0;
        while k < n_models {
            let end = k + order[k..].iter().take_while(|&&m| key(m) == key(order[k])).count();
            let shared = (k + 1 + end) as f64 / 2.0;
            for &m in &order[k..end] {
                ranks[m][r] = shared;
            }
            k = end;
        }
    }
    let (mean, std) = ranks.iter().map(|r| mean_std(r)).unzip();
    Ok(RankSummary { ranks, mean, std })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub c_index: f64,
    pub ibs: f64,
    pub integrated_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRanks {
    pub c_index: f64,
    pub ibs: f64,
    pub integrated_auc: f64,
}

/// Metric means over `per_seed`, with optional cross-model rank summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub c_index: f64,
    pub ibs: f64,
    pub integrated_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ks: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank_mean: Option<MetricRanks>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank_std: Option<MetricRanks>,
}

impl MetricReport {
    pub fn from_runs(per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(SurvError::Metric("no runs to aggregate".into()));
        }
        let col = |f: fn(&SeedMetrics) -> f64| mean_std(&per_seed.iter().map(f).collect::<Vec<_>>()).0;
        let ks = if per_seed.iter().all(|s| s.ks.is_some()) {
            Some(col(|s| s.ks.unwrap_or(0.0)))
        } else {
            None
        };
        Ok(MetricReport {
            c_index: col(|s| s.c_index),
            ibs: col(|s| s.ibs),
            integrated_auc: col(|s| s.integrated_auc),
            ks,
            per_seed,
            rank_mean: None,
            rank_std: None,
        })
    }
}

/// C-index, IBS and integrated AUC of curves on a labelled set.
pub fn score_curves(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    g: &StepFunction,
) -> Result<(f64, f64, f64)> {
    let predicted: Vec<f64> = curves.iter().map(|c| expected_time(c, grid)).collect();
    let c = harrell_cindex(&predicted, times, events)?;
    let ibs = integrated_brier(curves, grid, times, events, g)?;
    let eval_times: Vec<f64> = default_auc_times(times, events)?
        .into_iter()
        .filter(|&t| g.eval(t) > 0.0)
        .collect();
    let auc = cumulative_dynamic_auc(curves, grid, times, events, g, &eval_times)?;
    Ok((c, ibs, auc.integrated))
}
