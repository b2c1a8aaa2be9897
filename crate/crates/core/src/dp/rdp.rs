//! Rényi-DP accounting for the subsampled Gaussian mechanism.
//!
//! `log A_alpha` follows the standard series for the sampled Gaussian: an
//! exact binomial expansion at integer orders and a two-sided erfc series at
//! fractional orders. Composition over steps is multiplication per order.

use serde::Serialize;
use statrs::function::erf::erfc;

use super::PrivacyBudget;
use crate::error::{Error, Result};

/// Fixed order grid, 1.25 ... 512.
pub fn default_orders() -> Vec<f64> {
    let mut v = vec![1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0, 3.5, 4.0, 4.5];
    v.extend((5..=64).map(f64::from));
    v.extend([80.0, 96.0, 128.0, 256.0, 512.0]);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    rdp: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, rdp: Vec<f64>) -> Result<Self> {
        if orders.len() != rdp.len() {
            return Err(Error::invalid("rdp curve", "orders and values differ in length"));
        }
        if orders.iter().any(|&a| !(a > 1.0)) {
            return Err(Error::invalid("rdp curve", "orders must exceed 1"));
        }
        if rdp.iter().any(|&r| r.is_nan() || r < 0.0) {
            return Err(Error::invalid("rdp curve", "values must be non-negative"));
        }
        Ok(Self { orders, rdp })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.rdp
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    /// Sequential composition with another curve over the same orders.
    pub fn compose(&self, other: &RdpCurve) -> Result<RdpCurve> {
        if self.orders != other.orders {
            return Err(Error::invalid("rdp curve", "composition needs identical orders"));
        }
        Ok(RdpCurve {
            orders: self.orders.clone(),
            rdp: self.rdp.iter().zip(&other.rdp).map(|(a, b)| a + b).collect(),
        })
    }

    /// Smallest epsilon over the grid and the order achieving it.
    pub fn best_epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid("delta", "must be in (0, 1)"));
        }
        if self.is_empty() {
            return Err(Error::Empty("rdp curve"));
        }
        let log_inv_delta = (1.0 / delta).ln();
        let mut best = (f64::INFINITY, self.orders[0]);
        for (&a, &r) in self.orders.iter().zip(&self.rdp) {
            let eps = r + log_inv_delta / (a - 1.0);
            if eps < best.0 {
                best = (eps, a);
            }
        }
        Ok(best)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) - exp(b))`, requires `a >= b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln()
            + (1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)).ln()
    }
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for i in 0..=alpha {
        if i > 0 {
            log_binom += ((alpha - i + 1) as f64).ln() - (i as f64).ln();
        }
        let fi = i as f64;
        let term = log_binom + fi * lq + (alpha - i) as f64 * l1q + (fi * fi - fi) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // running |binom(alpha, i)| in log space with its sign
    let mut log_coef = 0.0;
    let mut positive = true;
    let mut i = 0u64;
    loop {
        if i > 0 {
            let f = (alpha - i as f64 + 1.0) / i as f64;
            log_coef += f.abs().ln();
            if f < 0.0 {
                positive = !positive;
            }
        }
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            a0 = log_add(a0, log_s0);
            a1 = log_add(a1, log_s1);
        } else {
            a0 = log_sub(a0, log_s0);
            a1 = log_sub(a1, log_s1);
        }
        i += 1;
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
    }
    log_add(a0, a1)
}

/// RDP of one application of the sampled Gaussian at order `alpha`.
pub fn rdp_single_step(q: f64, z: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return alpha / (2.0 * z * z);
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= 1e6 {
        log_a_int(q, z, alpha as u64)
    } else {
        log_a_frac(q, z, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

/// Per-order RDP of the subsampled Gaussian with sampling rate `q` and noise
/// multiplier `z`, composed over `steps` applications.
pub fn rdp_subsampled_gaussian(q: f64, z: f64, steps: u64, orders: &[f64]) -> Result<RdpCurve> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid("sampling rate q", "must be in (0, 1]"));
    }
    if z == 0.0 {
        return Err(Error::invalid(
            "noise multiplier",
            "z = 0 gives no privacy; the budget is infinite",
        ));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::invalid("noise multiplier", "must be finite and positive"));
    }
    if steps == 0 {
        return Err(Error::invalid("steps", "must be at least 1"));
    }
    let rdp = orders
        .iter()
        .map(|&a| {
            if q == 1.0 {
                a * steps as f64 / (2.0 * z * z)
            } else {
                steps as f64 * rdp_single_step(q, z, a)
            }
        })
        .collect();
    RdpCurve::new(orders.to_vec(), rdp)
}

/// `epsilon = min_alpha [ rdp(alpha) + log(1/delta) / (alpha - 1) ]`.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<PrivacyBudget> {
    let (epsilon, _) = curve.best_epsilon(delta)?;
    PrivacyBudget::new(epsilon, delta)
}
