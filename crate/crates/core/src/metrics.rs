//! Presentation-attack detection metrics.
//!
//! Positive class is *attack*: `tp` counts attacks rejected as attacks, `fn_`
//! attacks accepted as bona fide, `tn` bona fides accepted, `fp` bona fides
//! rejected. APCER and BPCER are the usual per-class error rates
//! `fn / (tp + fn)` and `fp / (tn + fp)`, and ACER is their mean.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{decide, DecisionConfig, Label, Score};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples to score")]
    Empty,
    #[error("{0} is undefined: the set has no {1} samples")]
    Undefined(&'static str, &'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn attacks(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn bona_fides(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Tallies decisions at threshold `h` using the same rule as [`decide`].
///
/// `h` is not range-checked here so sweeps can probe any point.
pub fn confusion(pairs: &[(Score, Label)], h: f64) -> Result<ConfusionCounts, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let cfg = DecisionConfig { threshold: h };
    let mut c = ConfusionCounts::default();
    for (score, label) in pairs {
        match (label, decide(score, &cfg)) {
            (Label::Attack, Label::Attack) => c.tp += 1,
            (Label::Attack, Label::BonaFide) => c.fn_ += 1,
            (Label::BonaFide, Label::BonaFide) => c.tn += 1,
            (Label::BonaFide, Label::Attack) => c.fp += 1,
        }
    }
    Ok(c)
}

/// Fraction of attacks accepted as bona fide.
pub fn apcer(counts: &ConfusionCounts) -> Result<f64, MetricsError> {
    match counts.attacks() {
        0 => Err(MetricsError::Undefined("APCER", "attack")),
        n => Ok(counts.fn_ as f64 / n as f64),
    }
}

/// Fraction of bona fides rejected as attacks.
pub fn bpcer(counts: &ConfusionCounts) -> Result<f64, MetricsError> {
    match counts.bona_fides() {
        0 => Err(MetricsError::Undefined("BPCER", "bona fide")),
        n => Ok(counts.fp as f64 / n as f64),
    }
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: ConfusionCounts,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    #[serde(rename = "n")]
    pub n_samples: u64,
}

impl MetricsReport {
    pub fn from_counts(counts: ConfusionCounts, threshold: f64) -> Result<Self, MetricsError> {
        let a = apcer(&counts)?;
        let b = bpcer(&counts)?;
        Ok(MetricsReport {
            threshold,
            counts,
            apcer: a,
            bpcer: b,
            acer: acer(a, b),
            n_samples: counts.total(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn report(pairs: &[(Score, Label)], h: f64) -> Result<MetricsReport, MetricsError> {
    MetricsReport::from_counts(confusion(pairs, h)?, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    /// Samples decided bona fide at this threshold.
    pub accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// Threshold with the lowest ACER; the smallest one on ties.
    pub best_threshold: f64,
}

impl SweepCurve {
    pub fn best(&self) -> &SweepPoint {
        self.points
            .iter()
            .find(|p| p.threshold == self.best_threshold)
            .expect("best threshold is one of the points")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,apcer,bpcer,acer\n");
        for p in &self.points {
            writeln!(out, "{},{},{},{}", p.threshold, p.apcer, p.bpcer, p.acer).unwrap();
        }
        out
    }
}

/// Evaluates `n_points` thresholds `i / (n_points + 1)`, `i = 1..=n_points`.
pub fn sweep(pairs: &[(Score, Label)], n_points: usize) -> Result<SweepCurve, MetricsError> {
    if n_points < 2 {
        return Err(MetricsError::InvalidArgument(format!("sweep needs at least 2 points, got {n_points}")));
    }
    let mut points = Vec::with_capacity(n_points);
    for i in 1..=n_points {
        let h = i as f64 / (n_points + 1) as f64;
        let r = report(pairs, h)?;
        points.push(SweepPoint {
            threshold: h,
            apcer: r.apcer,
            bpcer: r.bpcer,
            acer: r.acer,
            accepted: r.counts.tn + r.counts.fn_,
        });
    }
    let best = points
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if b.acer <= p.acer => Some(b),
            _ => Some(p),
        })
        .expect("at least two points");
    Ok(SweepCurve {
        best_threshold: best.threshold,
        points,
    })
}
