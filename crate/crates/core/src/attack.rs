//! Nearest-neighbour inversion of metric-DP perturbed embeddings.
//!
//! The adversary holds every clean reference vector and maps each perturbed
//! vector back to its closest reference under Euclidean distance. Accuracy
//! is the fraction mapped to their true origin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{metric_dp_perturb, MetricDpParams};
use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

pub const DEFAULT_ETAS: [f64; 11] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub eta: f64,
    pub accuracy: f64,
    pub n_trials: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest reference; ties go to the lowest index.
pub fn nearest(reference: &[EmbeddingVector], query: &EmbeddingVector) -> Result<usize> {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, r) in reference.iter().enumerate() {
        if r.dim() != query.dim() {
            return Err(Error::DimensionMismatch {
                expected: r.dim(),
                actual: query.dim(),
            });
        }
        let d = sq_dist(r.as_slice(), query.as_slice());
        if d < best.0 {
            best = (d, i);
        }
    }
    if best.1 == usize::MAX {
        return Err(Error::Empty("reference set"));
    }
    Ok(best.1)
}

/// Fraction of perturbed vectors whose nearest reference is their origin.
pub fn invert(reference: &[EmbeddingVector], perturbed: &[(usize, EmbeddingVector)]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("reference set"));
    }
    if perturbed.is_empty() {
        return Err(Error::Empty("perturbed set"));
    }
    if let Some((i, _)) = perturbed.iter().find(|(i, _)| *i >= reference.len()) {
        return Err(Error::invalid("perturbed", format!("origin index {i} out of range")));
    }
    let hits = perturbed
        .par_iter()
        .map(|(origin, v)| Ok((nearest(reference, v)? == *origin) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / perturbed.len() as f64)
}

/// Perturb every reference vector once per `eta` and attack.
pub fn sweep_eta(reference: &[EmbeddingVector], etas: &[f64], seed: u64) -> Result<Vec<InversionResult>> {
    let dim = reference.first().ok_or(Error::Empty("reference set"))?.dim();
    etas.iter()
        .enumerate()
        .map(|(k, &eta)| {
            let params = MetricDpParams::new(eta, dim)?;
            let mut rng = rng_from(seed, &[tag::ATTACK, k as u64]);
            let perturbed = reference
                .iter()
                .enumerate()
                .map(|(i, v)| Ok((i, metric_dp_perturb(v, &params, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(InversionResult {
                eta,
                accuracy: invert(reference, &perturbed)?,
                n_trials: perturbed.len(),
            })
        })
        .collect()
}
