//! Latency-weighted evaluation.
//!
//! A warning at latency `l` (messages seen) costs
//! `penalty(l) = -1 + 2 / (1 + exp(-p (l - 1)))`, which is zero for an
//! immediate warning and tends to one. The rate `p` is chosen so that the
//! penalty is one half at the median conversation length. `speed` is one
//! minus the median penalty over warned positives, and
//! `f_latency = F1 * speed`.
//!
//! Quantities that would divide by zero are `None` rather than NaN.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::espd::{evaluate_scored, EspdConfig, ScoredConversation};
use crate::error::{Error, Result};

pub fn penalty(latency: usize, p: f64) -> Result<f64> {
    if latency < 1 {
        return Err(Error::invalid("latency", "must be at least 1"));
    }
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::invalid("p", "must be positive and finite"));
    }
    Ok(-1.0 + 2.0 / (1.0 + (-p * (latency - 1) as f64).exp()))
}

/// Rate at which `penalty(m, p) = 0.5`.
pub fn derive_p(median_messages: usize) -> Result<f64> {
    if median_messages < 2 {
        return Err(Error::invalid("median_messages", "must be at least 2"));
    }
    Ok(3f64.ln() / (median_messages - 1) as f64)
}

/// Median; an even count takes the midpoint of the central pair.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn speed(latencies: &[usize], p: f64) -> Result<f64> {
    if latencies.is_empty() {
        return Err(Error::Undefined("speed: no warnings on positive conversations"));
    }
    let pens = latencies.iter().map(|&l| penalty(l, p)).collect::<Result<Vec<_>>>()?;
    Ok(1.0 - median(&pens).expect("nonempty"))
}

/// `F1 * speed`; zero when speed is undefined.
pub fn f_latency(f1: f64, speed: Option<f64>) -> f64 {
    speed.map_or(0.0, |s| f1 * s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.fp + self.tn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub counts: ConfusionCounts,
    pub f1: f64,
    pub recall: f64,
    /// Undefined when nothing was warned.
    pub precision: Option<f64>,
    /// Undefined when no positive conversation was warned.
    pub speed: Option<f64>,
    pub f_latency: f64,
    /// Undefined without negatives.
    pub fpr: Option<f64>,
    pub p: f64,
    pub latencies: Vec<usize>,
}

pub fn report(counts: ConfusionCounts, latencies: &[usize], p: f64) -> Result<EvaluationReport> {
    if counts.tp + counts.fn_ == 0 {
        return Err(Error::Insufficient("report needs at least one positive conversation".into()));
    }
    if latencies.len() != counts.tp {
        return Err(Error::invalid(
            "latencies",
            format!("{} latencies for {} true positives", latencies.len(), counts.tp),
        ));
    }
    let f1 = counts.f1().expect("positives present");
    let speed = if latencies.is_empty() {
        None
    } else {
        Some(speed(latencies, p)?)
    };
    Ok(EvaluationReport {
        counts,
        f1,
        recall: counts.recall().expect("positives present"),
        precision: counts.precision(),
        speed,
        f_latency: f_latency(f1, speed),
        fpr: counts.fpr(),
        p,
        latencies: latencies.to_vec(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

pub const REPORT_HEADER: [&str; 13] = [
    "model", "config", "tp", "fp", "tn", "fn", "f1", "recall", "precision", "speed", "f_latency", "fpr", "p",
];

impl EvaluationReport {
    /// One CSV row matching [`REPORT_HEADER`]. Latencies go to the verdict
    /// file.
    pub fn csv_row(&self, model: &str, config: &str) -> Vec<String> {
        let c = &self.counts;
        vec![
            model.to_string(),
            config.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            self.f1.to_string(),
            self.recall.to_string(),
            cell(self.precision),
            cell(self.speed),
            self.f_latency.to_string(),
            cell(self.fpr),
            self.p.to_string(),
        ]
    }
}

/// Outcome of a threshold search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Calibration {
    Attained { threshold: f64, fpr: f64 },
    Unattainable { best_threshold: f64, best_fpr: f64 },
}

impl Calibration {
    pub fn threshold(&self) -> f64 {
        match *self {
            Calibration::Attained { threshold, .. } => threshold,
            Calibration::Unattainable { best_threshold, .. } => best_threshold,
        }
    }
}

impl std::fmt::Display for Calibration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Calibration::Attained { threshold, fpr } => write!(f, "threshold={threshold} fpr={fpr}"),
            Calibration::Unattainable { best_threshold, best_fpr } => {
                write!(f, "unattainable, best={best_fpr} at threshold={best_threshold}")
            }
        }
    }
}

/// Candidate thresholds: the configured default, then just above each
/// observed score at or above it. Every distinct labelling reachable from the
/// default upwards appears once. Sorted ascending.
pub fn threshold_grid(scored: &[ScoredConversation], default: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = scored
        .iter()
        .flat_map(|s| s.scores.iter().copied())
        .filter(|&s| s >= default)
        .map(f64::next_up)
        .filter(|&t| t < 1.0)
        .collect();
    grid.push(default);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

fn fpr_at(negatives: &[ScoredConversation], cfg: &EspdConfig, t: f64) -> Result<f64> {
    let ev = evaluate_scored(negatives, &cfg.with_threshold(t))?;
    Ok(ev.counts.fp as f64 / negatives.len() as f64)
}

/// Smallest grid threshold whose streaming FPR over `negatives` is at most
/// `target_fpr`.
pub fn calibrate_threshold(negatives: &[ScoredConversation], cfg: &EspdConfig, target_fpr: f64) -> Result<Calibration> {
    cfg.validate()?;
    if negatives.is_empty() {
        return Err(Error::Empty("calibration negatives"));
    }
    if negatives.iter().any(|s| s.label.is_positive()) {
        return Err(Error::invalid("negatives", "calibration set contains a positive conversation"));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::invalid("target_fpr", "must lie in [0, 1]"));
    }
    let grid = threshold_grid(negatives, cfg.proba_threshold);
    let fprs = grid
        .par_iter()
        .map(|&t| fpr_at(negatives, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = fprs.iter().position(|&f| f <= target_fpr) {
        return Ok(Calibration::Attained {
            threshold: grid[i],
            fpr: fprs[i],
        });
    }
    let (i, &best) = fprs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("grid holds the default");
    Ok(Calibration::Unattainable {
        best_threshold: grid[i],
        best_fpr: best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub fpr: Option<f64>,
    pub f1: f64,
    pub speed: Option<f64>,
}

/// Evaluate the whole test set at every grid threshold.
pub fn fpr_sweep(scored: &[ScoredConversation], cfg: &EspdConfig, p: f64) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    threshold_grid(scored, cfg.proba_threshold)
        .par_iter()
        .map(|&t| {
            let ev = evaluate_scored(scored, &cfg.with_threshold(t))?;
            let r = report(ev.counts, &ev.latencies, p)?;
            Ok(SweepRow {
                threshold: t,
                fpr: r.fpr,
                f1: r.f1,
                speed: r.speed,
            })
        })
        .collect()
}
