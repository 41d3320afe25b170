//! Discretization grid over event times and discrete survival curves.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};

/// Strictly increasing event times `tau_1 < ... < tau_m`; the last bin is
/// the open interval `[tau_m, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    taus: Vec<f64>,
}

impl TimeGrid {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.len() < 2 {
            return Err(SurvError::Grid(format!("need at least 2 grid points, got {}", taus.len())));
        }
        if taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(SurvError::Grid("grid points must be finite and positive".into()));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SurvError::Grid("grid points must be strictly increasing".into()));
        }
        Ok(TimeGrid { taus })
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    /// Number of bins `m`.
    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    /// `I(t) = max{i : tau_i <= t}` (1-based), or 0 when `t < tau_1`.
    pub fn interval_index(&self, t: f64) -> usize {
        self.taus.partition_point(|&tau| tau <= t)
    }
}

/// Sorted unique uncensored times, optionally thinned to
/// `ceil(fraction * m)` evenly spaced order statistics (endpoints kept).
pub fn build_grid(times: &[f64], events: &[bool], fraction: f64) -> Result<TimeGrid> {
    if times.len() != events.len() {
        return Err(SurvError::Shape(format!("{} times, {} events", times.len(), events.len())));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SurvError::Grid(format!("grid fraction must be in (0, 1], got {fraction}")));
    }
    let mut taus: Vec<f64> = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    if taus.len() < 2 {
        return Err(SurvError::Grid(format!(
            "need at least 2 distinct uncensored times, got {}",
            taus.len()
        )));
    }
    if fraction < 1.0 {
        let m = taus.len();
        let k = ((fraction * m as f64).ceil() as usize).clamp(2, m);
        if k < m {
            taus = (0..k)
                .map(|i| {
                    let pos = (i as f64 * (m - 1) as f64 / (k - 1) as f64).round() as usize;
                    taus[pos]
                })
                .collect();
        }
    }
    TimeGrid::new(taus)
}

/// Bin probabilities `p` and survival values `S_i = 1 - sum_{j<=i} p_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSurvival {
    pub probs: Vec<f64>,
    pub survival: Vec<f64>,
}

impl DiscreteSurvival {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `S_idx` with the convention `S_0 = 1`.
    pub fn survival_index(&self, idx: usize) -> f64 {
        if idx == 0 {
            1.0
        } else {
            self.survival[idx - 1]
        }
    }

    /// Checks the simplex / monotonicity invariants at tolerance `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let m = self.probs.len();
        if m == 0 || self.survival.len() != m {
            return Err(SurvError::Shape("curve has inconsistent lengths".into()));
        }
        if self.probs.iter().any(|p| !p.is_finite() || *p < -tol) {
            return Err(SurvError::Validation("negative or non-finite bin probability".into()));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(SurvError::Validation(format!("bin probabilities sum to {total}")));
        }
        if self.survival.windows(2).any(|w| w[1] > w[0] + tol) {
            return Err(SurvError::Validation("survival curve increases".into()));
        }
        if self.survival.iter().any(|s| *s < -tol || *s > 1.0 + tol) {
            return Err(SurvError::Validation("survival value outside [0, 1]".into()));
        }
        if self.survival[m - 1].abs() > tol {
            return Err(SurvError::Validation(format!(
                "final survival value {} is not 0",
                self.survival[m - 1]
            )));
        }
        Ok(())
    }
}

pub fn probs_to_survival(probs: &[f64]) -> Result<DiscreteSurvival> {
    if probs.is_empty() {
        return Err(SurvError::Validation("empty probability vector".into()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(SurvError::Validation("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(SurvError::Validation(format!("probabilities sum to {total}, expected 1")));
    }
    // tail sums equal 1 - cumsum on the simplex and keep precision near 0
    let mut survival = vec![0.0; probs.len()];
    let mut tail = 0.0;
    for i in (0..probs.len() - 1).rev() {
        tail += probs[i + 1];
        survival[i] = tail.clamp(0.0, 1.0);
    }
    Ok(DiscreteSurvival {
        probs: probs.to_vec(),
        survival,
    })
}

/// Right-continuous step evaluation; 1 before the first grid point.
pub fn survival_at(curve: &DiscreteSurvival, grid: &TimeGrid, t: f64) -> f64 {
    curve.survival_index(grid.interval_index(t))
}
