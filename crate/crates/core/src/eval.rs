//! Pose and plane-matching metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_angle, translation_distance, Pose};
use crate::matching::MatchLabels;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{estimates} estimates for {ground_truth} ground-truth poses")]
    LengthMismatch { estimates: usize, ground_truth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallThreshold {
    pub meters: f64,
    pub degrees: f64,
}

pub fn default_thresholds() -> Vec<RecallThreshold> {
    [(0.05, 5.0), (0.10, 10.0), (0.25, 20.0)]
        .into_iter()
        .map(|(meters, degrees)| RecallThreshold { meters, degrees })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    pub translation_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub threshold: RecallThreshold,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub per_query: Vec<PoseError>,
    pub mean_rotation_deg: f64,
    pub median_rotation_deg: f64,
    pub mean_translation_m: f64,
    pub median_translation_m: f64,
    pub recalls: Vec<Recall>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn pose_error(estimate: &Pose, truth: &Pose) -> PoseError {
    PoseError {
        rotation_deg: rotation_angle(&estimate.rotation, &truth.rotation),
        translation_m: translation_distance(&estimate.translation, &truth.translation),
    }
}

/// Per-query errors, aggregates and recall; a query counts at a threshold
/// when both errors are at or below it.
pub fn pose_metrics(
    estimates: &[Pose],
    ground_truth: &[Pose],
    thresholds: &[RecallThreshold],
) -> Result<PoseMetrics, EvalError> {
    if estimates.len() != ground_truth.len() {
        return Err(EvalError::LengthMismatch {
            estimates: estimates.len(),
            ground_truth: ground_truth.len(),
        });
    }
    let per_query: Vec<PoseError> = estimates.iter().zip(ground_truth).map(|(e, g)| pose_error(e, g)).collect();
    Ok(summarize(per_query, thresholds))
}

pub fn summarize(per_query: Vec<PoseError>, thresholds: &[RecallThreshold]) -> PoseMetrics {
    let rot: Vec<f64> = per_query.iter().map(|e| e.rotation_deg).collect();
    let tra: Vec<f64> = per_query.iter().map(|e| e.translation_m).collect();
    let recalls = thresholds
        .iter()
        .map(|t| {
            let hits = per_query
                .iter()
                .filter(|e| e.translation_m <= t.meters && e.rotation_deg <= t.degrees)
                .count();
            Recall {
                threshold: *t,
                recall: if per_query.is_empty() {
                    0.0
                } else {
                    hits as f64 / per_query.len() as f64
                },
            }
        })
        .collect();
    PoseMetrics {
        mean_rotation_deg: mean(&rot),
        median_rotation_deg: median(&rot),
        mean_translation_m: mean(&tra),
        median_translation_m: median(&tra),
        recalls,
        per_query,
    }
}

pub const DEFAULT_IOU_MIN: f64 = 0.3;

/// A predicted correspondence with its confidence and the IoU between the
/// query mask and the projected map mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub query_idx: usize,
    pub map_idx: usize,
    pub score: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub true_positives: usize,
    pub ground_truth: usize,
    pub predicted: usize,
}

/// A prediction is a true positive when it names the labelled map primitive
/// for its query and the IoU reaches `iou_min`.
pub fn classify(preds: &[ScoredPair], labels: &MatchLabels, iou_min: f64) -> Vec<(f64, bool)> {
    preds
        .iter()
        .map(|p| {
            let tp = labels.map_index_of(p.query_idx) == Some(p.map_idx) && p.iou >= iou_min;
            (p.score, tp)
        })
        .collect()
}

pub fn match_metrics(preds: &[ScoredPair], labels: &MatchLabels, iou_min: f64) -> MatchMetrics {
    metrics_from_classified(&classify(preds, labels, iou_min), labels.pairs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall after admitting each group of equal scores, in
/// descending score order.
pub fn pr_curve(items: &[(f64, bool)], n_gt: usize) -> Vec<PrPoint> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            tp += sorted[i].1 as usize;
            seen += 1;
            i += 1;
        }
        out.push(PrPoint {
            threshold: s,
            precision: tp as f64 / seen as f64,
            recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
        });
    }
    out
}

/// Metrics from `(score, is_true_positive)` items; AP is the step-wise
/// area `Σ P_k (R_k − R_{k−1})` over the PR staircase.
pub fn metrics_from_classified(items: &[(f64, bool)], n_gt: usize) -> MatchMetrics {
    let tp = items.iter().filter(|(_, t)| *t).count();
    let predicted = items.len();
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for p in pr_curve(items, n_gt) {
        ap += p.precision * (p.recall - prev_recall);
        prev_recall = p.recall;
    }
    MatchMetrics {
        precision,
        recall,
        f1,
        ap,
        true_positives: tp,
        ground_truth: n_gt,
        predicted,
    }
}
