//! Metric-DP perturbation of embeddings under Euclidean distance.
//!
//! Noise has density proportional to `exp(-eta * |n|)`: a uniform direction
//! on the unit sphere scaled by a `Gamma(d, 1/eta)` magnitude.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{l2_norm, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDpParams {
    pub eta: f64,
    pub dimension: usize,
}

impl MetricDpParams {
    pub fn new(eta: f64, dimension: usize) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::invalid("metric_dp.eta", "must be finite and positive"));
        }
        if dimension == 0 {
            return Err(Error::invalid("metric_dp.dimension", "must be at least 1"));
        }
        Ok(Self { eta, dimension })
    }
}

/// Draw one noise vector of the mechanism.
pub fn sample_noise<R: Rng + ?Sized>(params: &MetricDpParams, rng: &mut R) -> Vec<f64> {
    let d = params.dimension;
    let dir: Vec<f64> = loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if l2_norm(&v) > 0.0 {
            break v;
        }
    };
    let n = l2_norm(&dir);
    let magnitude = Gamma::new(d as f64, 1.0 / params.eta)
        .expect("validated parameters")
        .sample(rng);
    dir.into_iter().map(|x| x / n * magnitude).collect()
}

pub fn metric_dp_perturb<R: Rng + ?Sized>(
    x: &EmbeddingVector,
    params: &MetricDpParams,
    rng: &mut R,
) -> Result<EmbeddingVector> {
    if x.dim() != params.dimension {
        return Err(Error::DimensionMismatch {
            expected: params.dimension,
            actual: x.dim(),
        });
    }
    let noise = sample_noise(params, rng);
    EmbeddingVector::new(x.as_slice().iter().zip(noise).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_magnitude_matches_gamma_mean() {
        let p = MetricDpParams::new(20.0, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mean = (0..n).map(|_| l2_norm(&sample_noise(&p, &mut rng))).sum::<f64>() / n as f64;
        assert!((mean / (16.0 / 20.0) - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn huge_eta_is_nearly_identity() {
        let p = MetricDpParams::new(1e9, 32).unwrap();
        let x = EmbeddingVector::new((0..32).map(|i| i as f64).collect()).unwrap();
        let y = metric_dp_perturb(&x, &p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(x.as_slice().iter().zip(y.as_slice()).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn directions_are_uniform() {
        let p = MetricDpParams::new(1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mut mean = vec![0.0; 8];
        for _ in 0..n {
            let v = sample_noise(&p, &mut rng);
            let k = l2_norm(&v);
            mean.iter_mut().zip(&v).for_each(|(m, x)| *m += x / k / n as f64);
        }
        assert!(l2_norm(&mean) <= 0.02, "{}", l2_norm(&mean));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(MetricDpParams::new(0.0, 3).is_err());
        let p = MetricDpParams::new(1.0, 3).unwrap();
        let x = EmbeddingVector::zeros(2);
        assert!(metric_dp_perturb(&x, &p, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
