//! ROC analysis, operating points, probability calibration, bootstrap AUC,
//! OOD separation and retention curves, and the augmentation-robustness matrix.

mod calibration;
mod roc;

pub use calibration::calibrate;
pub use roc::{
    auc, auc_of, clamp_opt, optimal_operating_point, roc_curve, OperatingPoint, RocCurve, RocPoint,
    OPT_EPS,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ood::OodMetricKind;
use crate::preprocess::Image;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub mean: f64,
    pub std: f64,
    pub n_splits: usize,
    pub split_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub n_splits: usize,
    pub split_fraction: f64,
    pub seed: u64,
    /// Sample the split fraction from each class separately.
    pub stratify: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            split_fraction: 0.5,
            seed: 0,
            stratify: false,
        }
    }
}

const MAX_SPLIT_RETRIES: usize = 100;

/// AUC mean and sample standard deviation over random subsets drawn without
/// replacement, each `split_fraction` of the test set.
pub fn bootstrap_auc(
    scores: &[f64],
    labels: &[bool],
    cfg: &BootstrapConfig,
) -> Result<AucEstimate> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if cfg.n_splits == 0 || !(cfg.split_fraction > 0.0 && cfg.split_fraction <= 1.0) {
        return Err(Error::InvalidConfig(
            "need n_splits >= 1 and split_fraction in (0, 1]".into(),
        ));
    }
    // Fails early with DegenerateLabels when the full set has one class.
    roc_curve(scores, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let take = |n: usize| ((n as f64 * cfg.split_fraction).round() as usize).clamp(1, n);
    let mut aucs = Vec::with_capacity(cfg.n_splits);
    for _ in 0..cfg.n_splits {
        let mut attempt = 0;
        let value = loop {
            let idx: Vec<usize> = if cfg.stratify {
                let p = sample(&mut rng, pos.len(), take(pos.len()))
                    .into_iter()
                    .map(|i| pos[i]);
                let n = sample(&mut rng, neg.len(), take(neg.len()))
                    .into_iter()
                    .map(|i| neg[i]);
                p.chain(n).collect()
            } else {
                let m = take(scores.len()).max(2.min(scores.len()));
                sample(&mut rng, scores.len(), m).into_vec()
            };
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
            match auc_of(&s, &l) {
                Ok(v) => break v,
                Err(Error::DegenerateLabels) if attempt < MAX_SPLIT_RETRIES => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        aucs.push(value);
    }
    Ok(AucEstimate {
        mean: stats::mean(&aucs),
        std: stats::sample_std(&aucs),
        n_splits: cfg.n_splits,
        split_fraction: cfg.split_fraction,
    })
}

/// Orients an OOD score so that larger means more in-distribution.
fn in_distribution_score(score: f64, kind: OodMetricKind) -> f64 {
    if kind.higher_is_in() {
        score
    } else {
        -score
    }
}

/// AUC of the gate viewed as a classifier of in-distribution (positive) vs
/// out-of-distribution samples; 1.0 means a perfect gate for `kind`.
pub fn separation_auc(in_scores: &[f64], out_scores: &[f64], kind: OodMetricKind) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    let scores: Vec<f64> = in_scores
        .iter()
        .chain(out_scores)
        .map(|&s| in_distribution_score(s, kind))
        .collect();
    let labels: Vec<bool> = std::iter::repeat_n(true, in_scores.len())
        .chain(std::iter::repeat_n(false, out_scores.len()))
        .collect();
    auc_of(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    /// Gate cutoff in the metric's own units.
    pub cutoff: f64,
    pub retained_fraction: f64,
    pub auc_on_retained: f64,
}

/// Task AUC on the subset admitted at increasingly strict OOD cutoffs.
///
/// Cutoffs are the quantiles of the observed OOD scores at levels
/// `1, 1 - 1/n, ..., 1/n` (loosest first). Cutoffs whose retained subset
/// holds a single class are dropped.
pub fn retention_curve(
    ood_scores: &[f64],
    task_scores: &[f64],
    task_labels: &[bool],
    kind: OodMetricKind,
    n_cutoffs: usize,
) -> Result<Vec<RetentionPoint>> {
    let n = ood_scores.len();
    if task_scores.len() != n || task_labels.len() != n {
        return Err(Error::ShapeMismatch(
            "retention inputs must be aligned".into(),
        ));
    }
    if n == 0 || n_cutoffs == 0 {
        return Ok(Vec::new());
    }
    // Outlierness: larger = further from the training distribution.
    let outlier: Vec<f64> = ood_scores
        .iter()
        .map(|&s| -in_distribution_score(s, kind))
        .collect();
    let mut sorted = outlier.clone();
    sorted.sort_by(f64::total_cmp);
    let mut points = Vec::new();
    for k in 0..n_cutoffs {
        let level = 1.0 - k as f64 / n_cutoffs as f64;
        let cut = stats::quantile_sorted(&sorted, level);
        let kept: Vec<usize> = (0..n).filter(|&i| outlier[i] <= cut).collect();
        let s: Vec<f64> = kept.iter().map(|&i| task_scores[i]).collect();
        let l: Vec<bool> = kept.iter().map(|&i| task_labels[i]).collect();
        match auc_of(&s, &l) {
            Ok(a) => points.push(RetentionPoint {
                cutoff: if kind.higher_is_in() { -cut } else { cut },
                retained_fraction: kept.len() as f64 / n as f64,
                auc_on_retained: a,
            }),
            Err(Error::DegenerateLabels) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(points)
}

/// Anything producing per-class probabilities for an image.
pub trait MultiLabelScorer: Sync {
    fn num_classes(&self) -> usize;
    fn scores(&self, image: &Image) -> Result<Vec<f64>>;
}

/// A test set at one augmentation level.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub level: String,
    pub images: Vec<Image>,
    pub labels: Vec<Vec<bool>>,
}

/// Mean per-class AUC over the classes whose AUC is defined on `set`.
pub fn mean_class_auc(scorer: &dyn MultiLabelScorer, set: &LabeledSet) -> Result<f64> {
    let preds = set
        .images
        .iter()
        .map(|img| scorer.scores(img))
        .collect::<Result<Vec<_>>>()?;
    let mut aucs = Vec::new();
    for c in 0..scorer.num_classes() {
        let s: Vec<f64> = preds.iter().map(|p| p[c]).collect();
        let l: Vec<bool> = set.labels.iter().map(|l| l[c]).collect();
        match auc_of(&s, &l) {
            Ok(a) => aucs.push(a),
            Err(Error::DegenerateLabels) => {}
            Err(e) => return Err(e),
        }
    }
    if aucs.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    Ok(stats::mean(&aucs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationMatrix {
    /// Train-time augmentation level of each row's model.
    pub train_levels: Vec<String>,
    /// Test-time augmentation level of each column.
    pub test_levels: Vec<String>,
    pub auc: Vec<Vec<f64>>,
}

pub fn augmentation_matrix(
    models: &[(String, &dyn MultiLabelScorer)],
    test_sets: &[LabeledSet],
) -> Result<AugmentationMatrix> {
    if let Some((_, first)) = models.first() {
        if models
            .iter()
            .any(|(_, m)| m.num_classes() != first.num_classes())
        {
            return Err(Error::InvalidConfig("models must share a class set".into()));
        }
    }
    let auc = models
        .iter()
        .map(|(_, m)| {
            test_sets
                .iter()
                .map(|set| mean_class_auc(*m, set))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AugmentationMatrix {
        train_levels: models.iter().map(|(l, _)| l.clone()).collect(),
        test_levels: test_sets.iter().map(|s| s.level.clone()).collect(),
        auc,
    })
}
