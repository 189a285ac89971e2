//! Detection metrics over in/out score sets, plus classification and rank
//! statistics.
//!
//! Conventions: inliers are the positive class for every detection metric
//! except AUPR-Out; a sample is called an inlier at threshold `τ` iff its
//! score is `≥ τ`; thresholds range over the distinct observed scores.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Confidence scores for in-distribution and out-of-distribution samples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSet {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Self {
        ScoreSet {
            in_scores,
            out_scores,
        }
    }

    fn check(&self) -> Result<()> {
        if self.in_scores.is_empty() {
            return Err(Error::Empty("in-distribution scores"));
        }
        if self.out_scores.is_empty() {
            return Err(Error::Empty("out-of-distribution scores"));
        }
        Ok(())
    }

    /// Roles of in and out exchanged.
    pub fn swapped(&self) -> ScoreSet {
        ScoreSet::new(self.out_scores.clone(), self.in_scores.clone())
    }
}

/// One operating point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SweepPoint {
    /// Positives with score ≥ threshold.
    tp: usize,
    /// Negatives with score ≥ threshold.
    fp: usize,
}

/// Cumulative counts at each distinct threshold, highest threshold first.
fn sweep(pos: &[f64], neg: &[f64]) -> Vec<SweepPoint> {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(SweepPoint { tp, fp });
    }
    out
}

/// FPR at the highest threshold whose TPR reaches 0.95.
pub fn fpr_at_tpr95(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let (n_in, n_out) = (scores.in_scores.len(), scores.out_scores.len());
    let p = sweep(&scores.in_scores, &scores.out_scores)
        .into_iter()
        .find(|p| p.tp * 100 >= 95 * n_in)
        .expect("lowest threshold admits every inlier");
    Ok(p.fp as f64 / n_out as f64)
}

/// The threshold used by [`fpr_at_tpr95`]: the largest score `τ` with
/// `#{in ≥ τ} ≥ 0.95·n_in`.
pub fn tpr95_threshold(in_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() {
        return Err(Error::Empty("in-distribution scores"));
    }
    let mut s = in_scores.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let need = (95 * s.len()).div_ceil(100);
    Ok(s[need - 1])
}

/// `min_τ 0.5·(1 − TPR) + 0.5·FPR` over every distinct threshold plus the
/// accept-nothing and accept-everything extremes.
pub fn detection_error(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let (n_in, n_out) = (scores.in_scores.len() as f64, scores.out_scores.len() as f64);
    // accept-nothing threshold
    let mut best: f64 = 0.5;
    for p in sweep(&scores.in_scores, &scores.out_scores) {
        let err = 0.5 * (1.0 - p.tp as f64 / n_in) + 0.5 * p.fp as f64 / n_out;
        best = best.min(err);
    }
    Ok(best)
}

/// `P(in > out) + 0.5·P(in = out)` over all in/out pairs.
pub fn auroc(scores: &ScoreSet) -> Result<f64> {
    scores.check()?;
    let mut out = scores.out_scores.clone();
    out.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &s in &scores.in_scores {
        let below = out.partition_point(|&o| o < s);
        let upto = out.partition_point(|&o| o <= s);
        wins += below as f64 + 0.5 * (upto - below) as f64;
    }
    Ok(wins / (scores.in_scores.len() as f64 * out.len() as f64))
}

/// ROC points `(FPR, TPR)` from `(0, 0)` through every distinct threshold.
pub fn roc_curve(scores: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    scores.check()?;
    let (n_in, n_out) = (scores.in_scores.len() as f64, scores.out_scores.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(
        sweep(&scores.in_scores, &scores.out_scores)
            .into_iter()
            .map(|p| (p.fp as f64 / n_out, p.tp as f64 / n_in)),
    );
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    In,
    Out,
}

/// Step-wise area under the precision-recall curve:
/// `Σ_k (R_k − R_{k−1})·P_k` over distinct thresholds.
///
/// With `Positive::Out` the scores are negated so that low confidence
/// ranks first.
pub fn aupr(scores: &ScoreSet, positive: Positive) -> Result<f64> {
    scores.check()?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        Positive::In => (scores.in_scores.clone(), scores.out_scores.clone()),
        Positive::Out => (
            scores.out_scores.iter().map(|s| -s).collect(),
            scores.in_scores.iter().map(|s| -s).collect(),
        ),
    };
    let n_pos = pos.len() as f64;
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for p in sweep(&pos, &neg) {
        let recall = p.tp as f64 / n_pos;
        let precision = p.tp as f64 / (p.tp + p.fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// The five detection metrics for one in/out pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionReport {
    pub fpr_at_tpr95: f64,
    pub dterr: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
    pub n_in: usize,
    pub n_out: usize,
}

impl DetectionReport {
    pub fn compute(scores: &ScoreSet) -> Result<Self> {
        Ok(DetectionReport {
            fpr_at_tpr95: fpr_at_tpr95(scores)?,
            dterr: detection_error(scores)?,
            auroc: auroc(scores)?,
            aupr_in: aupr(scores, Positive::In)?,
            aupr_out: aupr(scores, Positive::Out)?,
            n_in: scores.in_scores.len(),
            n_out: scores.out_scores.len(),
        })
    }

    /// Metrics in table order: FPR@TPR95, DTERR, AUROC, AUPR-In, AUPR-Out.
    pub fn as_array(&self) -> [f64; 5] {
        [
            self.fpr_at_tpr95,
            self.dterr,
            self.auroc,
            self.aupr_in,
            self.aupr_out,
        ]
    }
}

fn check_lengths(predictions: &[usize], labels: &[usize]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs labels",
            left: predictions.len(),
            right: labels.len(),
        });
    }
    Ok(())
}

/// Recall per class; `None` for classes absent from `labels`.
pub fn per_class_sensitivity(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Option<f64>>> {
    check_lengths(predictions, labels)?;
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: num_classes,
            });
        }
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect())
}

/// Mean recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let sens = per_class_sensitivity(predictions, labels, num_classes)?;
    let present: Vec<f64> = sens.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Empty("labels"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Kendall's tau-b between two equal-length samples (`0` when either side
/// is constant).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "kendall inputs",
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_a, mut ties_b) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (concordant + discordant + ties_a) as f64;
    let n1 = (concordant + discordant + ties_b) as f64;
    if n0 == 0.0 || n1 == 0.0 {
        return Ok(0.0);
    }
    Ok((concordant - discordant) as f64 / crate::math::sqrt(n0 * n1))
}

/// Population variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}
