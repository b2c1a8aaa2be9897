//! Differentially private mini-batch SGD for the logistic model.

use serde::{Deserialize, Serialize};

use super::{clip_vector, gaussian_noise, rdp, AccountantReport};
use crate::error::{Error, Result};
use crate::model::{check_examples, epoch_batches, GradientVector, LogisticModel, SgdParams, TrainingExample};
use crate::rng::{rng_from, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSgdParams {
    /// Per-example gradient clip `C`.
    pub clip_norm: f64,
    /// Noise std divided by `C`.
    pub noise_multiplier: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub delta: f64,
}

impl DpSgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("dp_sgd.clip_norm", "must be positive"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::invalid("dp_sgd.noise_multiplier", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("dp_sgd.batch_size", "must be at least 1"));
        }
        if self.batch_size > self.dataset_size {
            return Err(Error::invalid("dp_sgd.batch_size", "larger than the dataset"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("dp_sgd.delta", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn sampling_rate(&self) -> f64 {
        self.batch_size as f64 / self.dataset_size as f64
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.dataset_size.div_ceil(self.batch_size) as u64
    }

    /// Budget spent by `epochs` local epochs.
    pub fn account(&self, epochs: u64) -> Result<AccountantReport> {
        let q = self.sampling_rate();
        let steps = epochs * self.steps_per_epoch();
        let curve = rdp::rdp_subsampled_gaussian(q, self.noise_multiplier, steps, &rdp::default_orders())?;
        AccountantReport::from_curve("dp_sgd", q, self.noise_multiplier, steps, &curve, self.delta)
    }
}

/// Per-epoch clipping diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClipStats {
    pub examples: usize,
    pub clipped: usize,
    pub max_clipped_norm: f64,
    pub steps: usize,
}

/// One DP-SGD epoch: per mini-batch, clip every per-example gradient to `C`,
/// sum, add `N(0, z^2 C^2)` per coordinate, divide by the batch length and
/// step. Batches are drawn exactly as in [`sgd_epoch`](crate::model::sgd_epoch)
/// for the same seed; the noise comes from an independent stream.
pub fn dpsgd_epoch(
    model: &LogisticModel,
    data: &[TrainingExample],
    params: &DpSgdParams,
    lr: f64,
    seed: u64,
) -> Result<(LogisticModel, ClipStats)> {
    check_examples(model, data)?;
    if params.batch_size > data.len() {
        return Err(Error::invalid("dp_sgd.batch_size", "larger than the dataset"));
    }
    params.validate()?;
    let sgd = SgdParams {
        lr,
        batch_size: params.batch_size,
        l2: 0.0,
    };
    sgd.validate()?;
    let sigma = params.noise_multiplier * params.clip_norm;
    let mut noise_rng = rng_from(seed, &[tag::NOISE]);
    let mut m = model.clone();
    let mut stats = ClipStats::default();
    let dim = m.dim();
    for batch in epoch_batches(data.len(), params.batch_size, seed) {
        let mut sum = GradientVector::zeros(dim);
        for &i in &batch {
            let g = m.example_gradient(&data[i])?;
            let raw = g.norm();
            let g = if raw <= params.clip_norm {
                g
            } else {
                let mut flat = g.d_weights;
                flat.push(g.d_bias);
                let mut c = clip_vector(&flat, params.clip_norm)?;
                stats.clipped += 1;
                let d_bias = c.pop().expect("bias entry");
                GradientVector { d_weights: c, d_bias }
            };
            stats.max_clipped_norm = stats.max_clipped_norm.max(g.norm());
            stats.examples += 1;
            sum.add_assign(&g);
        }
        if sigma > 0.0 {
            let noise = gaussian_noise(dim + 1, sigma, &mut noise_rng)?;
            sum.d_weights.iter_mut().zip(&noise).for_each(|(s, n)| *s += n);
            sum.d_bias += noise[dim];
        }
        sum.scale(1.0 / batch.len() as f64);
        m.apply_step(&sum, &sgd);
        stats.steps += 1;
    }
    Ok((m, stats))
}
