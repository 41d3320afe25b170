//! Censored histogram loss.
//!
//! Uncensored rows pay a Gaussian-smoothed negative log-likelihood over the
//! bins around their event bin; censored rows pay `-log S_I(t)`. The kernel
//! has standard deviation `r / 3` and is truncated to `|j - I(t)| <= r`, then
//! renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurvError};
use crate::timegrid::DiscreteSurvival;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Gaussian,
    /// All weight on the event bin: the plain discretized likelihood.
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvHLConfig {
    pub r: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

fn default_epsilon() -> f64 {
    1e-12
}

impl SurvHLConfig {
    pub fn new(r: u32) -> Result<Self> {
        let cfg = SurvHLConfig {
            r,
            epsilon: default_epsilon(),
            weighting: Weighting::Gaussian,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn delta() -> Self {
        SurvHLConfig {
            r: 1,
            epsilon: default_epsilon(),
            weighting: Weighting::Delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(SurvError::Config("smoothing radius r must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(SurvError::Config(format!("epsilon must be in (0, 1e-6], got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Weights over bins `1..=m` (returned 0-based) for an event in bin `center`.
    pub fn weights(&self, center: usize, m: usize) -> Result<Vec<f64>> {
        match self.weighting {
            Weighting::Gaussian => gaussian_weights(center, self.r, m),
            Weighting::Delta => {
                check_center(center, m)?;
                let mut w = vec![0.0; m];
                w[center - 1] = 1.0;
                Ok(w)
            }
        }
    }
}

fn check_center(center: usize, m: usize) -> Result<()> {
    if center < 1 || center > m {
        return Err(SurvError::Validation(format!("kernel center {center} outside bins 1..={m}")));
    }
    Ok(())
}

/// Truncated, renormalized Gaussian kernel with `sigma = r / 3` centred on
/// the 1-based bin `center`. The returned vector is indexed 0-based.
pub fn gaussian_weights(center: usize, r: u32, m: usize) -> Result<Vec<f64>> {
    check_center(center, m)?;
    if r < 1 {
        return Err(SurvError::Config("smoothing radius r must be at least 1".into()));
    }
    let r = r as usize;
    let sigma = r as f64 / 3.0;
    let lo = center.saturating_sub(r).max(1);
    let hi = (center + r).min(m);
    let mut w = vec![0.0; m];
    let mut total = 0.0;
    for j in lo..=hi {
        let d = j as f64 - center as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        w[j - 1] = v;
        total += v;
    }
    for v in &mut w[lo - 1..hi] {
        *v /= total;
    }
    Ok(w)
}

/// Event rows before the first grid point are scored in bin 1; censored rows
/// before the grid have `S_0 = 1` and cost nothing.
fn event_bin(idx: usize) -> usize {
    idx.max(1)
}

pub fn survhl_row(curve: &DiscreteSurvival, idx: usize, event: bool, cfg: &SurvHLConfig) -> Result<f64> {
    let m = curve.len();
    if idx > m {
        return Err(SurvError::Validation(format!("interval index {idx} exceeds bin count {m}")));
    }
    if event {
        let w = cfg.weights(event_bin(idx), m)?;
        Ok(w
            .iter()
            .zip(&curve.probs)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, p)| -w * p.max(cfg.epsilon).ln())
            .sum())
    } else {
        Ok(-curve.survival_index(idx).max(cfg.epsilon).ln())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean of the per-row losses.
    pub loss: f64,
    /// `d loss / d p` per row (dense, length m).
    pub grad_probs: Vec<Vec<f64>>,
}

pub fn survhl_batch(
    curves: &[DiscreteSurvival],
    idxs: &[usize],
    events: &[bool],
    cfg: &SurvHLConfig,
) -> Result<BatchLoss> {
    let n = curves.len();
    if n == 0 {
        return Err(SurvError::Validation("empty batch".into()));
    }
    if idxs.len() != n || events.len() != n {
        return Err(SurvError::Shape(format!(
            "{} curves, {} indices, {} event flags",
            n,
            idxs.len(),
            events.len()
        )));
    }
    let nf = n as f64;
    let mut total = 0.0;
    let mut grad_probs = Vec::with_capacity(n);
    for ((curve, &idx), &event) in curves.iter().zip(idxs).zip(events) {
        let m = curve.len();
        if idx > m {
            return Err(SurvError::Validation(format!("interval index {idx} exceeds bin count {m}")));
        }
        let mut grad = vec![0.0; m];
        if event {
            let w = cfg.weights(event_bin(idx), m)?;
            for j in 0..m {
                if w[j] == 0.0 {
                    continue;
                }
                let p = curve.probs[j];
                if p > cfg.epsilon {
                    total -= w[j] * p.ln();
                    grad[j] = -w[j] / (nf * p);
                } else {
                    total -= w[j] * cfg.epsilon.ln();
                }
            }
        } else if idx > 0 {
            let s = curve.survival_index(idx);
            if s > cfg.epsilon {
                total -= s.ln();
                let g = 1.0 / (nf * s);
                grad[..idx].fill(g);
            } else {
                total -= cfg.epsilon.ln();
            }
        }
        grad_probs.push(grad);
    }
    Ok(BatchLoss {
        loss: total / nf,
        grad_probs,
    })
}
