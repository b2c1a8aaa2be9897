//! Server-side DP-FedAvg: clipped client updates are averaged and the
//! average is noised; the clip can track a target quantile of update norms.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{gaussian_noise, rdp, AccountantReport, PrivacyBudget, DEFAULT_DELTA};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpFedAvgParams {
    /// Update clip `S` (initial value when adaptive).
    pub update_clip: f64,
    pub noise_multiplier: f64,
    pub clients_per_round: usize,
    pub total_clients: usize,
    pub rounds: usize,
    pub delta: f64,
    pub adaptive: bool,
    /// Target fraction of unclipped updates.
    pub target_quantile: f64,
    pub clip_lr: f64,
    /// Std of the noise on the unclipped count.
    pub indicator_noise_std: f64,
}

impl Default for DpFedAvgParams {
    fn default() -> Self {
        Self {
            update_clip: 1.0,
            noise_multiplier: 1.0,
            clients_per_round: 1000,
            total_clients: 10_000,
            rounds: 100,
            delta: DEFAULT_DELTA,
            adaptive: false,
            target_quantile: 0.5,
            clip_lr: 0.2,
            indicator_noise_std: 0.0,
        }
    }
}

impl DpFedAvgParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.update_clip > 0.0 && self.update_clip.is_finite()) {
            return Err(Error::invalid("dp_fedavg.update_clip", "must be finite and positive"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::invalid("dp_fedavg.noise_multiplier", "must be finite and >= 0"));
        }
        if self.clients_per_round == 0 {
            return Err(Error::invalid("dp_fedavg.clients_per_round", "must be at least 1"));
        }
        if self.clients_per_round > self.total_clients {
            return Err(Error::invalid("dp_fedavg.clients_per_round", "exceeds total_clients"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("dp_fedavg.delta", "must be in (0, 1)"));
        }
        if self.adaptive {
            if !(self.target_quantile > 0.0 && self.target_quantile < 1.0) {
                return Err(Error::invalid("dp_fedavg.target_quantile", "must be in (0, 1)"));
            }
            if !(self.clip_lr >= 0.0) || !(self.indicator_noise_std >= 0.0) {
                return Err(Error::invalid("dp_fedavg adaptive parameters", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Noise std on the averaged update.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.update_clip / self.clients_per_round as f64
    }

    /// Accountant report over all rounds. With adaptive clipping the noised
    /// unclipped count is a second Gaussian query (sensitivity 1) composed
    /// with the update query.
    pub fn account(&self) -> Result<AccountantReport> {
        if self.noise_multiplier == 0.0 {
            return Err(Error::invalid("dp_fedavg.noise_multiplier", "z = 0 gives an infinite budget"));
        }
        let q = self.clients_per_round as f64 / self.total_clients as f64;
        let steps = self.rounds as u64;
        if steps == 0 {
            return Err(Error::invalid("dp_fedavg.rounds", "must be at least 1"));
        }
        let orders = rdp::default_orders();
        let mut curve = rdp::rdp_subsampled_gaussian(q, self.noise_multiplier, steps, &orders)?;
        if self.adaptive {
            if self.indicator_noise_std == 0.0 {
                return Err(Error::invalid(
                    "dp_fedavg.indicator_noise_std",
                    "adaptive clipping without count noise has an infinite budget",
                ));
            }
            let count = rdp::rdp_subsampled_gaussian(q, self.indicator_noise_std, steps, &orders)?;
            curve = curve.compose(&count)?;
        }
        AccountantReport::from_curve("dp_fedavg", q, self.noise_multiplier, steps, &curve, self.delta)
    }
}

/// `mean_update + N(0, (z S / m)^2 I)`.
pub fn dp_fedavg_noise<R: Rng + ?Sized>(
    mean_update: &[f64],
    params: &DpFedAvgParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if params.clients_per_round == 0 {
        return Err(Error::invalid("dp_fedavg.clients_per_round", "must be at least 1"));
    }
    let sigma = params.noise_std();
    if sigma == 0.0 {
        return Ok(mean_update.to_vec());
    }
    let noise = gaussian_noise(mean_update.len(), sigma, rng)?;
    Ok(mean_update.iter().zip(noise).map(|(a, b)| a + b).collect())
}

/// Noisy fraction of clients whose update norm was within the clip.
pub fn noisy_unclipped_fraction<R: Rng + ?Sized>(unclipped: usize, m: usize, noise_std: f64, rng: &mut R) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("clients_per_round", "must be at least 1"));
    }
    let noise = if noise_std > 0.0 {
        Normal::new(0.0, noise_std).expect("valid std").sample(rng)
    } else {
        0.0
    };
    Ok((unclipped as f64 + noise) / m as f64)
}

/// Geometric clip update `C * exp(-lr (b - gamma))`.
pub fn adaptive_clip_update(clip: f64, unclipped_fraction: f64, target_quantile: f64, clip_lr: f64) -> f64 {
    clip * (-clip_lr * (unclipped_fraction - target_quantile)).exp()
}

pub fn user_level_budget(params: &DpFedAvgParams) -> Result<PrivacyBudget> {
    let report = params.account()?;
    PrivacyBudget::new(report.epsilon, report.delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(z: f64, m: usize) -> DpFedAvgParams {
        DpFedAvgParams {
            update_clip: 2.0,
            noise_multiplier: z,
            clients_per_round: m,
            total_clients: 1000,
            rounds: 50,
            ..Default::default()
        }
    }

    fn sample_std(p: &DpFedAvgParams, seed: u64) -> f64 {
        let n = 100_000;
        let out = dp_fedavg_noise(&vec![0.0; n], p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt()
    }

    #[test]
    fn zero_noise_is_identity() {
        let v = vec![1.0, -2.0, 3.5];
        assert_eq!(dp_fedavg_noise(&v, &params(0.0, 10), &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), v);
    }

    #[test]
    fn noise_std_scales_with_clients() {
        let p = params(1.5, 10);
        let s10 = sample_std(&p, 1);
        assert!((s10 / (1.5 * 2.0 / 10.0) - 1.0).abs() < 0.02, "{s10}");
        let s20 = sample_std(&params(1.5, 20), 2);
        assert!((s10 / s20 - 2.0).abs() < 0.06, "{s10} {s20}");
    }

    #[test]
    fn adaptive_clip_examples() {
        assert_eq!(adaptive_clip_update(3.0, 0.5, 0.5, 0.2), 3.0);
        let shrunk = adaptive_clip_update(1.0, 1.0, 0.5, 0.2);
        assert!((shrunk - (-0.1f64).exp()).abs() < 1e-15);
        let grown = adaptive_clip_update(1.0, 0.0, 0.5, 0.2);
        assert!((grown - 0.1f64.exp()).abs() < 1e-15);
        let b = noisy_unclipped_fraction(3, 4, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, 0.75);
    }

    #[test]
    fn budget_monotonicity() {
        let base = params(1.0, 100);
        let e = user_level_budget(&base).unwrap().epsilon;
        let longer = user_level_budget(&DpFedAvgParams { rounds: 100, ..base }).unwrap().epsilon;
        let noisier = user_level_budget(&DpFedAvgParams { noise_multiplier: 2.0, ..base }).unwrap().epsilon;
        assert!(longer > e);
        assert!(noisier < e);
        assert!(user_level_budget(&params(0.0, 100)).is_err());
    }

    #[test]
    fn full_participation_matches_closed_form_path() {
        let p = DpFedAvgParams { noise_multiplier: 1.0, clients_per_round: 10, total_clients: 10, rounds: 1, ..Default::default() };
        let via_params = user_level_budget(&p).unwrap();
        let orders = rdp::default_orders();
        let closed: Vec<f64> = orders.iter().map(|a| a / 2.0).collect();
        let curve = rdp::RdpCurve::new(orders, closed).unwrap();
        let direct = rdp::rdp_to_dp(&curve, 1e-5).unwrap();
        assert_eq!(via_params.epsilon, direct.epsilon);
    }

    #[test]
    fn adaptive_budget_costs_more() {
        let fixed = params(1.0, 100);
        let adaptive = DpFedAvgParams { adaptive: true, indicator_noise_std: 10.0, ..fixed };
        assert!(user_level_budget(&adaptive).unwrap().epsilon > user_level_budget(&fixed).unwrap().epsilon);
        assert!(user_level_budget(&DpFedAvgParams { indicator_noise_std: 0.0, ..adaptive }).is_err());
    }
}
