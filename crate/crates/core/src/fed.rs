//! Weighted model aggregation and dynamic weight correction.
//!
//! Correction of one model part for round `k`:
//!
//! ```text
//! drift   = theta_k - theta_prev
//! theta_c = theta_k + sign * eta_c * mu * drift      (sign = +1 extrapolate, -1 stabilize)
//! theta_r = (1 - alpha) * theta_k + alpha * theta_c,  alpha = min(1 - 1/(k+1), beta)
//! ```
//!
//! `mu * drift` is the gradient of `(mu/2) ||theta_k - theta_prev||^2` with
//! respect to `theta_k`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Part};

/// Per-client weights `|D_i| / |D|`.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("aggregation needs at least one client"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!("aggregation weights must be finite and >= 0: {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("aggregation weights sum to {total}, not 1")));
        }
        Ok(AggregationWeights(weights))
    }

    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if total == 0 {
            return Err(Error::config("total dataset size is zero"));
        }
        Self::new(sizes.iter().map(|&n| n as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Elementwise weighted average, summed in ascending client order.
pub fn aggregate(params: &[ParamSet], weights: &AggregationWeights) -> Result<ParamSet> {
    if params.len() != weights.len() {
        return Err(Error::config(format!(
            "{} parameter sets but {} weights",
            params.len(),
            weights.len()
        )));
    }
    let (first, rest) = params.split_first().ok_or_else(|| Error::config("nothing to aggregate"))?;
    for p in rest {
        first.ensure_compatible(p)?;
    }
    let w = weights.as_slice();
    let mut out = first.map(|v| w[0] * v);
    for (p, &wi) in rest.iter().zip(&w[1..]) {
        for ((_, acc), (_, t)) in out.iter_mut().zip(p.iter()) {
            for (a, &v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += wi * v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `theta_c = theta_k + eta * grad`, the sign as literally written.
    #[default]
    Extrapolate,
    /// `theta_c = theta_k - eta * grad`, a descent step on the correction loss.
    Stabilize,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Extrapolate => 1.0,
            Direction::Stabilize => -1.0,
        }
    }
}

pub const DEFAULT_MU: f64 = 1e-4;
pub const DEFAULT_BETA: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DwcsConfig {
    pub mu: f64,
    /// Correction step size.
    pub eta: f64,
    pub beta: f64,
    pub direction: Direction,
}

impl DwcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("dwcs.mu must be >= 0, got {}", self.mu)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("dwcs.eta must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config(format!("dwcs.beta must be in [0, 1), got {}", self.beta)));
        }
        Ok(())
    }
}

/// Balancing factor `min(1 - 1/(k+1), beta)`.
pub fn alpha(k: u32, beta: f64) -> f64 {
    (1.0 - 1.0 / (f64::from(k) + 1.0)).min(beta)
}

/// Corrected model for round `k >= 1`; it is also the next round's anchor.
pub fn correct(theta_k: &ParamSet, theta_prev: &ParamSet, cfg: &DwcsConfig, k: u32) -> Result<ParamSet> {
    if k == 0 {
        return Err(Error::config("correction is defined for rounds k >= 1"));
    }
    cfg.validate()?;
    let step = cfg.direction.sign() * cfg.eta * cfg.mu;
    let a = alpha(k, cfg.beta);
    // theta_k + a (theta_c - theta_k): equal to the (1-a)/a blend, and
    // exactly theta_k whenever theta_c == theta_k.
    theta_k.zip_map(theta_prev, |cur, prev| {
        let corrected = cur + step * (cur - prev);
        cur + a * (corrected - cur)
    })
}

/// Previous round's post-correction model for each part.
#[derive(Clone, Debug, Default)]
pub struct AnchorStore {
    anchors: HashMap<Part, ParamSet>,
}

impl AnchorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, part: Part) -> Option<&ParamSet> {
        self.anchors.get(&part)
    }

    /// Replaces the anchor; `params.round` must exceed the stored round.
    pub fn update(&mut self, params: ParamSet) -> Result<()> {
        if let Some(prev) = self.anchors.get(&params.part) {
            if params.round <= prev.round {
                return Err(Error::misuse(format!(
                    "{} anchor round must increase: {} after {}",
                    params.part.prefix(),
                    params.round,
                    prev.round
                )));
            }
        }
        self.anchors.insert(params.part, params);
        Ok(())
    }
}
