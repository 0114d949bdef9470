//! Detection metrics: greedy radius matching against ground truth and the
//! precision–recall curve over a score sweep.

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{ObjectHypothesis, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("matching radius must be positive, got {0}")]
    Radius(f64),
    #[error("thresholds must be strictly descending and finite")]
    Thresholds,
}

/// A scored position to be matched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub position: Vec2,
    pub score: f64,
}

impl From<&ObjectHypothesis> for Prediction {
    fn from(h: &ObjectHypothesis) -> Self {
        Prediction {
            position: h.position,
            score: h.score,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(prediction index, truth index)` for every true positive.
    pub pairs: Vec<(usize, usize)>,
}

impl MatchResult {
    /// 1 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        let n = self.tp + self.fp;
        if n == 0 {
            1.0
        } else {
            self.tp as f64 / n as f64
        }
    }

    /// 0 when there is no truth.
    pub fn recall(&self) -> f64 {
        let n = self.tp + self.fn_;
        if n == 0 {
            0.0
        } else {
            self.tp as f64 / n as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn lexicographic(a: &Vec2, b: &Vec2) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Greedy matching: predictions in descending score order each take the
/// nearest unmatched truth within `radius`.
pub fn match_predictions(
    predictions: &[Prediction],
    truth: &[Vec2],
    radius: f64,
) -> Result<MatchResult, EvalError> {
    if !(radius > 0.0) {
        return Err(EvalError::Radius(radius));
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&predictions[a], &predictions[b]);
        pb.score
            .total_cmp(&pa.score)
            .then(lexicographic(&pa.position, &pb.position))
    });
    let mut taken = vec![false; truth.len()];
    let mut out = MatchResult::default();
    for i in order {
        let p = &predictions[i].position;
        let best = truth
            .iter()
            .enumerate()
            .filter(|(k, t)| !taken[*k] && (*t - p).norm() <= radius)
            .min_by(|(_, a), (_, b)| {
                (*a - p)
                    .norm()
                    .total_cmp(&(*b - p).norm())
                    .then(lexicographic(a, b))
            })
            .map(|(k, _)| k);
        match best {
            Some(k) => {
                taken[k] = true;
                out.tp += 1;
                out.pairs.push((i, k));
            }
            None => out.fp += 1,
        }
    }
    out.fn_ = truth.len() - out.tp;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// `Σ_k (R_k − R_{k−1}) · P_k` with `R_0 = 0`.
    pub auc: f64,
    /// Set when there was no truth, so recall is reported as 0.
    pub recall_undefined: bool,
}

/// Sweep `thresholds` (strictly descending), keeping predictions with
/// `score ≥ threshold` at each step.
pub fn pr_curve(
    predictions: &[Prediction],
    truth: &[Vec2],
    radius: f64,
    thresholds: &[f64],
) -> Result<PrCurve, EvalError> {
    if thresholds.iter().any(|t| t.is_nan()) || thresholds.windows(2).any(|w| w[0] <= w[1]) {
        return Err(EvalError::Thresholds);
    }
    let mut points = Vec::with_capacity(thresholds.len());
    let mut auc = 0.0;
    let mut last_recall = 0.0;
    for &threshold in thresholds {
        let kept: Vec<Prediction> = predictions
            .iter()
            .filter(|p| p.score >= threshold)
            .copied()
            .collect();
        let m = match_predictions(&kept, truth, radius)?;
        let (precision, recall) = (m.precision(), m.recall());
        auc += (recall - last_recall) * precision;
        last_recall = recall;
        points.push(PrPoint {
            threshold,
            precision,
            recall,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
    }
    Ok(PrCurve {
        points,
        auc: auc.clamp(0.0, 1.0),
        recall_undefined: truth.is_empty(),
    })
}

/// Distinct scores, descending: the thresholds at which the curve changes.
pub fn score_thresholds(predictions: &[Prediction]) -> Vec<f64> {
    let mut t: Vec<f64> = predictions
        .iter()
        .map(|p| p.score)
        .filter(|s| !s.is_nan())
        .collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// Root-mean-square distance over matched pairs; `None` without matches.
pub fn matched_rmse(predictions: &[Prediction], truth: &[Vec2], m: &MatchResult) -> Option<f64> {
    if m.pairs.is_empty() {
        return None;
    }
    let sum: f64 = m
        .pairs
        .iter()
        .map(|&(i, k)| (predictions[i].position - truth[k]).norm_squared())
        .sum();
    Some((sum / m.pairs.len() as f64).sqrt())
}
