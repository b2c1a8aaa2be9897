//! Privacy mechanisms and accounting.
//!
//! * [`clip_vector`] and [`gaussian_noise`] are the shared primitives.
//! * [`dpsgd`] clips per-example gradients and noises each mini-batch step
//!   (instance-level guarantee for a client's local training).
//! * [`fedavg`] noises the server-side average of clipped client updates
//!   (user-level guarantee), with optional adaptive clipping.
//! * [`metric`] perturbs embeddings before they ever reach training.
//! * [`rdp`] is the accountant used by the first two.

pub mod dpsgd;
pub mod fedavg;
pub mod metric;
pub mod rdp;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::l2_norm;
use crate::error::{ensure_finite, Error, Result};

pub use dpsgd::{dpsgd_epoch, ClipStats, DpSgdParams};
pub use fedavg::{adaptive_clip_update, dp_fedavg_noise, noisy_unclipped_fraction, user_level_budget, DpFedAvgParams};
pub use metric::{metric_dp_perturb, MetricDpParams};
pub use rdp::{default_orders, rdp_subsampled_gaussian, rdp_to_dp, RdpCurve};

pub const DEFAULT_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", "must be in (0, 1)"));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Accountant output for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantReport {
    pub mode: String,
    /// Sampling rate per step (DP-SGD) or per round (DP-FedAvg).
    pub q: f64,
    pub z: f64,
    /// Steps (DP-SGD, per participation) or rounds (DP-FedAvg).
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    /// RDP order at which the minimum was attained.
    pub order: f64,
    /// Linear composition across a client's participations (DP-SGD only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon_all_participations: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_participations: Option<u64>,
}

impl AccountantReport {
    pub fn from_curve(mode: &str, q: f64, z: f64, steps: u64, curve: &RdpCurve, delta: f64) -> Result<Self> {
        let (epsilon, order) = curve.best_epsilon(delta)?;
        Ok(Self {
            mode: mode.to_string(),
            q,
            z,
            steps,
            delta,
            epsilon,
            order,
            epsilon_all_participations: None,
            max_participations: None,
        })
    }
}

/// Scale `v` onto the `bound` ball if it lies outside; otherwise return it
/// unchanged.
pub fn clip_vector(v: &[f64], bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0) {
        return Err(Error::invalid("clip bound", "must be positive"));
    }
    ensure_finite(v, "clip input")?;
    let n = l2_norm(v);
    if n <= bound {
        Ok(v.to_vec())
    } else {
        let k = bound / n;
        Ok(v.iter().map(|x| x * k).collect())
    }
}

/// I.i.d. `N(0, sigma^2)` entries; all zeros when `sigma == 0`.
pub fn gaussian_noise<R: Rng + ?Sized>(dim: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("noise sigma", "must be finite and >= 0"));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; dim]);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok((0..dim).map(|_| normal.sample(rng)).collect())
}
