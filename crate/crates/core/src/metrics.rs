//! Temporal proactivity metrics: TimeDiff with tolerance/penalty, per-second
//! timeline F1, and PAUC trajectory integration with pluggable judge scores.
//!
//! Intervals `[a, b]` cover the seconds `a..b` for per-second rasterization
//! (F1, PAUC); prediction starts fall "within" an interval when
//! `a <= t <= b`, matching the TimeDiff formula.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("TimeDiff is undefined without ground-truth intervals")]
    EmptyGroundTruth,
    #[error("invalid interval [{a}, {b}]: end must exceed start")]
    InvalidInterval { a: i64, b: i64 },
    #[error("ground-truth intervals overlap at [{a}, {b}]")]
    OverlappingIntervals { a: i64, b: i64 },
    #[error("judge score {0} outside {{1,2,3}}")]
    InvalidScore(u8),
    #[error("missing judge score for in-interval response second {0}")]
    MissingScore(i64),
    #[error("omega must lie in [0,1], got {0}")]
    InvalidOmega(f64),
}

/// Ground-truth speaking interval [a, b], b > a.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtInterval {
    pub a: i64,
    pub b: i64,
}

fn sorted_intervals(gt: &[GtInterval]) -> Result<Vec<GtInterval>, MetricError> {
    if gt.is_empty() {
        return Err(MetricError::EmptyGroundTruth);
    }
    let mut v = gt.to_vec();
    for iv in &v {
        if iv.b <= iv.a {
            return Err(MetricError::InvalidInterval { a: iv.a, b: iv.b });
        }
    }
    v.sort_by_key(|iv| iv.a);
    for w in v.windows(2) {
        if w[1].a < w[0].b {
            return Err(MetricError::OverlappingIntervals {
                a: w[1].a,
                b: w[1].b,
            });
        }
    }
    Ok(v)
}

/// Model response timeline: the set of speak seconds plus the derived
/// run start times.
#[derive(Debug, Clone, Default)]
pub struct PredTimeline {
    starts: Vec<i64>,
    speak_seconds: BTreeSet<i64>,
}

impl PredTimeline {
    /// Starts are the first second of each consecutive speak run.
    pub fn from_speak_seconds<I: IntoIterator<Item = i64>>(seconds: I) -> Self {
        let speak_seconds: BTreeSet<i64> = seconds.into_iter().collect();
        let starts = speak_seconds
            .iter()
            .filter(|&&t| !speak_seconds.contains(&(t - 1)))
            .copied()
            .collect();
        Self {
            starts,
            speak_seconds,
        }
    }

    pub fn starts(&self) -> &[i64] {
        &self.starts
    }

    pub fn speak_seconds(&self) -> &BTreeSet<i64> {
        &self.speak_seconds
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimeDiffConfig {
    /// Tolerance window delta in seconds.
    pub delta: i64,
    /// Penalty per associated prediction outside the tolerance window.
    pub penalty_alpha: f64,
}

impl Default for TimeDiffConfig {
    fn default() -> Self {
        Self {
            delta: 3,
            penalty_alpha: 1.0,
        }
    }
}

/// Per-interval TimeDiff values and their mean.
///
/// Base term: min |start - a_i| over prediction starts inside [a_i, b_i],
/// or b_i - a_i when none. Penalty: `penalty_alpha` per associated start
/// outside [a_i - delta, b_i + delta], where each start associates to the
/// interval with the nearest onset (ties to the earlier interval).
pub fn timediff(
    gt: &[GtInterval],
    pred: &PredTimeline,
    cfg: &TimeDiffConfig,
) -> Result<(Vec<f64>, f64), MetricError> {
    let gt = sorted_intervals(gt)?;
    let mut associated: Vec<Vec<i64>> = vec![Vec::new(); gt.len()];
    for &t in pred.starts() {
        let mut best = 0usize;
        let mut best_dist = i64::MAX;
        for (i, iv) in gt.iter().enumerate() {
            let dist = (t - iv.a).abs();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        associated[best].push(t);
    }
    let mut per_interval = Vec::with_capacity(gt.len());
    for (i, iv) in gt.iter().enumerate() {
        let inside = pred
            .starts()
            .iter()
            .filter(|&&t| t >= iv.a && t <= iv.b)
            .map(|&t| (t - iv.a).abs())
            .min();
        let base = match inside {
            Some(d) => d as f64,
            None => (iv.b - iv.a) as f64,
        };
        let outside = associated[i]
            .iter()
            .filter(|&&t| t < iv.a - cfg.delta || t > iv.b + cfg.delta)
            .count();
        per_interval.push(base + cfg.penalty_alpha * outside as f64);
    }
    let mean = per_interval.iter().sum::<f64>() / per_interval.len() as f64;
    Ok((per_interval, mean))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct F1Result {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when the corresponding denominator was zero (value forced to 0).
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Per-second precision/recall/F1 over horizon [0, T): seconds inside
/// ground-truth intervals are positive, everything else negative.
pub fn temporal_f1(
    gt: &[GtInterval],
    pred: &PredTimeline,
    horizon: i64,
) -> Result<F1Result, MetricError> {
    let gt = sorted_intervals(gt)?;
    let mut positive = vec![false; horizon as usize];
    for iv in &gt {
        for t in iv.a.max(0)..iv.b.min(horizon) {
            positive[t as usize] = true;
        }
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for t in 0..horizon {
        let spoke = pred.speak_seconds().contains(&t);
        match (positive[t as usize], spoke) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision_defined = tp + fp > 0;
    let recall_defined = tp + fn_ > 0;
    let precision = if precision_defined {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if recall_defined {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(F1Result {
        precision,
        recall,
        f1,
        precision_defined,
        recall_defined,
    })
}

/// Trajectory-integrated proactive quality over in-interval seconds:
/// S_t = (1 - omega) * S_{t-1} + omega * q_t with q_t the judge score in
/// {1,2,3} for response seconds and 0 otherwise; PAUC is the mean of S_t
/// normalized by the maximum score 3.
pub fn pauc(
    gt: &[GtInterval],
    pred: &PredTimeline,
    scores: &BTreeMap<i64, u8>,
    omega: f64,
    s0: f64,
) -> Result<f64, MetricError> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(MetricError::InvalidOmega(omega));
    }
    for (&t, &s) in scores {
        if !(1..=3).contains(&s) {
            return Err(MetricError::InvalidScore(s));
        }
        let _ = t;
    }
    let gt = sorted_intervals(gt)?;
    let mut state = s0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for iv in &gt {
        for t in iv.a..iv.b {
            let q = if pred.speak_seconds().contains(&t) {
                match scores.get(&t) {
                    Some(&s) => s as f64,
                    None => return Err(MetricError::MissingScore(t)),
                }
            } else {
                0.0
            };
            state = (1.0 - omega) * state + omega * q;
            sum += state;
            count += 1;
        }
    }
    Ok(sum / count as f64 / 3.0)
}
