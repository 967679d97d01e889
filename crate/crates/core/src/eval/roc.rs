use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp for an operating point; the upper clamp is `1 - OPT_EPS`.
pub const OPT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive. Sentinels are `±inf`
    /// (serialized as `null`).
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Exact ROC over every distinct score: thresholds are midpoints between
/// consecutive unique scores plus the `+inf`/`-inf` sentinels, ordered by
/// decreasing threshold so `fpr` and `tpr` are non-decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
    pub score_min: f64,
    pub score_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub opt: f64,
    pub j_statistic: f64,
}

pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("ROC scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (p, n) = (positives as f64, negatives as f64);
    let point = |threshold, tp: usize, fp: usize| RocPoint {
        threshold,
        fpr: fp as f64 / n,
        tpr: tp as f64 / p,
        tp,
        fp,
    };
    let mut points = vec![point(f64::INFINITY, 0, 0)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if i < order.len() {
            let next = scores[order[i]];
            points.push(point(0.5 * (s + next), tp, fp));
        }
    }
    points.push(point(f64::NEG_INFINITY, tp, fp));
    Ok(RocCurve {
        points,
        positives,
        negatives,
        score_min: scores[order[order.len() - 1]],
        score_max: scores[order[0]],
    })
}

/// Trapezoidal area; equals the probability a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
        .sum()
}

pub fn auc_of(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(auc(&roc_curve(scores, labels)?))
}

/// Youden-optimal threshold over the interior (non-sentinel) thresholds.
///
/// Ties on J prefer the lower false-positive rate, then the larger threshold.
/// A curve with a single distinct score has no interior threshold; its
/// operating point is that score with J = 0. The result is clamped into
/// `[OPT_EPS, 1 - OPT_EPS]`.
pub fn optimal_operating_point(curve: &RocCurve) -> OperatingPoint {
    let interior = &curve.points[1..curve.points.len() - 1];
    let (p, n) = (curve.positives as i64, curve.negatives as i64);
    // J * P * N as an exact integer.
    let scaled_j = |pt: &RocPoint| pt.tp as i64 * n - pt.fp as i64 * p;
    let best = interior.iter().reduce(|best, pt| {
        let (jb, jp) = (scaled_j(best), scaled_j(pt));
        let better = jp > jb
            || (jp == jb
                && (pt.fp < best.fp || (pt.fp == best.fp && pt.threshold > best.threshold)));
        if better {
            pt
        } else {
            best
        }
    });
    let (opt, j) = match best {
        Some(pt) => (pt.threshold, pt.tpr - pt.fpr),
        None => (0.5 * (curve.score_min + curve.score_max), 0.0),
    };
    OperatingPoint {
        opt: clamp_opt(opt),
        j_statistic: j,
    }
}

pub fn clamp_opt(opt: f64) -> f64 {
    opt.clamp(OPT_EPS, 1.0 - OPT_EPS)
}
