//! Logistic regression trained with binary cross-entropy.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Label;
use crate::embed::EmbeddingVector;
use crate::error::{ensure_finite, Error, Result};
use crate::rng::{rng_from, tag};

/// Probability clamp used by the loss only.
pub const LOSS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: EmbeddingVector,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub d_weights: Vec<f64>,
    pub d_bias: f64,
}

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            d_weights: vec![0.0; dim],
            d_bias: 0.0,
        }
    }

    /// L2 norm over weights and bias together.
    pub fn norm(&self) -> f64 {
        (self.d_weights.iter().map(|x| x * x).sum::<f64>() + self.d_bias * self.d_bias).sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.d_weights.iter_mut().for_each(|x| *x *= k);
        self.d_bias *= k;
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        self.d_weights
            .iter_mut()
            .zip(&other.d_weights)
            .for_each(|(a, b)| *a += b);
        self.d_bias += other.d_bias;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdParams {
    pub lr: f64,
    pub batch_size: usize,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
}

impl Default for SgdParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            batch_size: 32,
            l2: 0.0,
        }
    }
}

impl SgdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("l2", "must be finite and >= 0"));
        }
        Ok(())
    }
}

impl LogisticModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn logit(&self, x: &EmbeddingVector) -> Result<f64> {
        self.check_dim(x.as_slice())?;
        Ok(self
            .weights
            .iter()
            .zip(x.as_slice())
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict_proba(&self, x: &EmbeddingVector) -> Result<f64> {
        self.logit(x).map(sigmoid)
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[LOSS_EPS, 1 - LOSS_EPS]`.
    pub fn bce_loss(&self, batch: &[TrainingExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut total = 0.0;
        for ex in batch {
            let p = self.predict_proba(&ex.features)?.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
            total -= match ex.label {
                Label::Positive => p.ln(),
                Label::Negative => (1.0 - p).ln(),
            };
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of the single-example loss: `(p - y) * x` and `p - y`.
    pub fn example_gradient(&self, ex: &TrainingExample) -> Result<GradientVector> {
        let r = self.predict_proba(&ex.features)? - ex.label.as_f64();
        Ok(GradientVector {
            d_weights: ex.features.as_slice().iter().map(|x| r * x).collect(),
            d_bias: r,
        })
    }

    /// `self -= lr * (g + l2 * w)`.
    pub(crate) fn apply_step(&mut self, g: &GradientVector, params: &SgdParams) {
        if params.l2 == 0.0 {
            for (w, d) in self.weights.iter_mut().zip(&g.d_weights) {
                *w -= params.lr * d;
            }
        } else {
            for (w, d) in self.weights.iter_mut().zip(&g.d_weights) {
                *w -= params.lr * (d + params.l2 * *w);
            }
        }
        self.bias -= params.lr * g.d_bias;
    }

    /// Weights followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let (bias, weights) = flat.split_last().ok_or(Error::Empty("parameter vector"))?;
        Ok(Self {
            weights: weights.to_vec(),
            bias: *bias,
        })
    }

    pub fn add_flat(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.dim() + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.dim() + 1,
                actual: delta.len(),
            });
        }
        self.weights.iter_mut().zip(delta).for_each(|(w, d)| *w += d);
        self.bias += delta[self.dim()];
        Ok(())
    }

    /// Checkpoint text: header, dimension, bias and one weight per line, all
    /// at 17 significant digits.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::with_capacity(self.dim() * 26 + 64);
        s.push_str("fedspd-logistic v1\n");
        let _ = writeln!(s, "dimension {}", self.dim());
        let _ = writeln!(s, "bias {:.16e}", self.bias);
        s.push_str("weights\n");
        for w in &self.weights {
            let _ = writeln!(s, "{w:.16e}");
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| Error::Parse {
            line,
            message: m.to_string(),
        };
        let mut lines = text.lines();
        if lines.next() != Some("fedspd-logistic v1") {
            return Err(bad(1, "missing checkpoint header"));
        }
        let dim: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("dimension "))
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| bad(2, "expected `dimension <n>`"))?;
        let bias: f64 = lines
            .next()
            .and_then(|l| l.strip_prefix("bias "))
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| bad(3, "expected `bias <value>`"))?;
        if lines.next() != Some("weights") {
            return Err(bad(4, "expected `weights`"));
        }
        let weights = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| l.trim().parse::<f64>().map_err(|_| bad(i + 5, "bad weight")))
            .collect::<Result<Vec<_>>>()?;
        if weights.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: weights.len(),
            });
        }
        ensure_finite(&weights, "checkpoint weights")?;
        ensure_finite(&[bias], "checkpoint bias")?;
        Ok(Self { weights, bias })
    }

    /// SHA-256 of the checkpoint text, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_checkpoint().as_bytes()))
    }
}

/// Shuffled mini-batch index lists for one epoch. The last batch may be
/// short.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed, &[tag::SHUFFLE]));
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn check_examples(m: &LogisticModel, data: &[TrainingExample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if let Some(ex) = data.iter().find(|e| e.features.dim() != m.dim()) {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            actual: ex.features.dim(),
        });
    }
    Ok(())
}

/// One epoch of mini-batch SGD in a seed-determined order.
pub fn sgd_epoch(
    model: &LogisticModel,
    data: &[TrainingExample],
    params: &SgdParams,
    seed: u64,
) -> Result<LogisticModel> {
    params.validate()?;
    check_examples(model, data)?;
    let mut m = model.clone();
    for batch in epoch_batches(data.len(), params.batch_size, seed) {
        let mut sum = GradientVector::zeros(m.dim());
        for &i in &batch {
            sum.add_assign(&m.example_gradient(&data[i])?);
        }
        sum.scale(1.0 / batch.len() as f64);
        m.apply_step(&sum, params);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ex(x: Vec<f64>, label: Label) -> TrainingExample {
        TrainingExample {
            features: EmbeddingVector::new(x).unwrap(),
            label,
        }
    }

    #[test]
    fn predict_basics() {
        let m = LogisticModel::zeros(3);
        assert_eq!(m.predict_proba(&EmbeddingVector::new(vec![5.0, -2.0, 1.0]).unwrap()).unwrap(), 0.5);

        let m = LogisticModel {
            weights: vec![1.0, 0.0],
            bias: 0.0,
        };
        let p = m.predict_proba(&EmbeddingVector::new(vec![3f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((p - 0.75).abs() < 1e-15);

        let big = LogisticModel {
            weights: vec![40.0],
            bias: 0.0,
        };
        let p = big.predict_proba(&EmbeddingVector::new(vec![1.0]).unwrap()).unwrap();
        assert!((1.0 - 1e-12..=1.0).contains(&p));
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
        assert!(big.predict_proba(&EmbeddingVector::zeros(2)).is_err());
    }

    #[test]
    fn loss_values() {
        let m = LogisticModel::zeros(2);
        let batch = vec![ex(vec![1.0, 2.0], Label::Positive), ex(vec![0.0, -1.0], Label::Negative)];
        assert!((m.bce_loss(&batch).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(m.bce_loss(&[]).is_err());

        let confident = LogisticModel {
            weights: vec![100.0, 0.0],
            bias: 0.0,
        };
        let batch = vec![ex(vec![1.0, 0.0], Label::Positive), ex(vec![-1.0, 0.0], Label::Negative)];
        assert!(confident.bce_loss(&batch).unwrap() <= 1e-11);

        let m = LogisticModel {
            weights: vec![1.0],
            bias: 0.0,
        };
        let single = vec![ex(vec![3f64.ln()], Label::Positive)];
        assert!((m.bce_loss(&single).unwrap() + 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gradient_edge_cases() {
        let m = LogisticModel::zeros(3);
        let g = m.example_gradient(&ex(vec![0.0; 3], Label::Positive)).unwrap();
        assert_eq!(g.d_weights, vec![0.0; 3]);
        assert_eq!(g.d_bias, -0.5);

        // saturated logit: p == 1.0 exactly
        let sat = LogisticModel {
            weights: vec![1000.0, 0.0, 0.0],
            bias: 0.0,
        };
        let g = sat.example_gradient(&ex(vec![1.0, 2.0, 3.0], Label::Positive)).unwrap();
        assert_eq!(g, GradientVector::zeros(3));
    }

    /// Central finite difference of the single-example loss.
    fn fd_gradient(m: &LogisticModel, e: &TrainingExample, h: f64) -> Vec<f64> {
        let flat = m.to_flat();
        (0..flat.len())
            .map(|j| {
                let mut up = flat.clone();
                let mut dn = flat.clone();
                up[j] += h;
                dn[j] -= h;
                let lu = LogisticModel::from_flat(&up).unwrap().bce_loss(std::slice::from_ref(e)).unwrap();
                let ld = LogisticModel::from_flat(&dn).unwrap().bce_loss(std::slice::from_ref(e)).unwrap();
                (lu - ld) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let dim = rng.random_range(1..6);
            let m = LogisticModel {
                weights: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: rng.random_range(-1.0..1.0),
            };
            let label = if rng.random_bool(0.5) { Label::Positive } else { Label::Negative };
            let e = ex((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(), label);
            let g = m.example_gradient(&e).unwrap();
            let mut analytic = g.d_weights.clone();
            analytic.push(g.d_bias);
            for (a, n) in analytic.iter().zip(fd_gradient(&m, &e, 1e-4)) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-5, "analytic {a} vs numeric {n}");
            }
        }
    }

    #[test]
    fn sgd_zero_lr_and_determinism() {
        let data: Vec<_> = (0..20)
            .map(|i| ex(vec![i as f64 * 0.1, 1.0], if i % 2 == 0 { Label::Positive } else { Label::Negative }))
            .collect();
        let m = LogisticModel::zeros(2);
        let frozen = SgdParams { lr: 0.0, batch_size: 4, l2: 0.0 };
        assert_eq!(sgd_epoch(&m, &data, &frozen, 1).unwrap(), m);
        let p = SgdParams { lr: 0.1, batch_size: 3, l2: 0.0 };
        assert_eq!(sgd_epoch(&m, &data, &p, 5).unwrap(), sgd_epoch(&m, &data, &p, 5).unwrap());
        assert!(sgd_epoch(&m, &[], &p, 5).is_err());
        assert!(sgd_epoch(&m, &data, &SgdParams { batch_size: 0, ..p }, 5).is_err());
    }

    #[test]
    fn sgd_single_step_by_hand() {
        let m = LogisticModel {
            weights: vec![0.5, -0.25],
            bias: 0.1,
        };
        let e = ex(vec![2.0, 1.0], Label::Positive);
        let p = sigmoid(0.5 * 2.0 - 0.25 * 1.0 + 0.1);
        let lr = 0.3;
        let out = sgd_epoch(&m, std::slice::from_ref(&e), &SgdParams { lr, batch_size: 1, l2: 0.0 }, 0).unwrap();
        let expect_w = [0.5 - lr * (p - 1.0) * 2.0, -0.25 - lr * (p - 1.0) * 1.0];
        assert!((out.weights[0] - expect_w[0]).abs() < 1e-15);
        assert!((out.weights[1] - expect_w[1]).abs() < 1e-15);
        assert!((out.bias - (0.1 - lr * (p - 1.0))).abs() < 1e-15);
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let data = vec![ex(vec![1.0, 0.5], Label::Positive), ex(vec![-1.0, -0.5], Label::Negative)];
        let mut m = LogisticModel::zeros(2);
        let p = SgdParams { lr: 0.1, batch_size: 2, l2: 0.0 };
        let mut prev = m.bce_loss(&data).unwrap();
        for step in 0..100 {
            m = sgd_epoch(&m, &data, &p, step).unwrap();
            let l = m.bce_loss(&data).unwrap();
            assert!(l <= prev, "step {step}: {l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn l2_shrinks_weights() {
        let data = vec![ex(vec![0.0], Label::Positive)];
        let m = LogisticModel { weights: vec![2.0], bias: 0.0 };
        let out = sgd_epoch(&m, &data, &SgdParams { lr: 0.5, batch_size: 1, l2: 0.1 }, 0).unwrap();
        assert!((out.weights[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_errors() {
        assert!(LogisticModel::from_checkpoint("nope").is_err());
        let mut text = LogisticModel::zeros(3).to_checkpoint();
        text.push_str("1.0\n");
        assert!(matches!(LogisticModel::from_checkpoint(&text), Err(Error::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_bit_exact(ws in proptest::collection::vec(-1e300f64..1e300, 0..20), b in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            let m = LogisticModel { weights: ws, bias: b };
            let back = LogisticModel::from_checkpoint(&m.to_checkpoint()).unwrap();
            prop_assert_eq!(back.bias.to_bits(), m.bias.to_bits());
            prop_assert!(back.weights.iter().zip(&m.weights).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn proba_monotone_in_logit(a in -800f64..800.0, b in -800f64..800.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid(lo) <= sigmoid(hi));
        }
    }
}
