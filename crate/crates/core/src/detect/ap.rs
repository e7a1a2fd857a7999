use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, score_order, BoundingBox};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub ap: f64,
    pub iou_match: f64,
    pub truths: usize,
    pub predictions: usize,
    pub true_positives: usize,
    /// Set when there are no truths, so recall (and AP) is undefined; AP is then 0.
    pub recall_undefined: bool,
    pub curve: Vec<PrPoint>,
}

/// Matches predictions to truths scene by scene. Predictions are visited in
/// descending score (ties by x, y, then scene order); each takes the unmatched
/// truth of its scene with the highest IoU, if that IoU is at least `iou_match`.
/// Returns `(score, is_true_positive)` in visiting order.
pub fn match_predictions(predictions: &[Vec<BoundingBox>], truths: &[Vec<BoundingBox>], iou_match: f64) -> Vec<(f64, bool)> {
    let mut flat: Vec<(usize, BoundingBox)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(s, boxes)| boxes.iter().map(move |b| (s, *b)))
        .collect();
    flat.sort_by(|a, b| score_order(&a.1, &b.1).then(a.0.cmp(&b.0)));
    let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
    flat.into_iter()
        .map(|(s, p)| {
            let mut best: Option<(usize, f64)> = None;
            if let Some(scene_truths) = truths.get(s) {
                for (j, t) in scene_truths.iter().enumerate() {
                    let v = iou(&p, t);
                    if !used[s][j] && v >= iou_match && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
            }
            if let Some((j, _)) = best {
                used[s][j] = true;
            }
            (p.score, best.is_some())
        })
        .collect()
}

/// Area under the precision-recall curve by trapezoids, starting from
/// `(recall 0, first precision)`.
pub fn trapezoid_ap(curve: &[PrPoint]) -> f64 {
    let Some(first) = curve.first() else { return 0.0 };
    let mut prev = (0.0, first.precision);
    let mut area = 0.0;
    for p in curve {
        area += (p.recall - prev.0) * (p.precision + prev.1) / 2.0;
        prev = (p.recall, p.precision);
    }
    area
}

/// Precision and recall at every distinct score threshold, and AP.
pub fn evaluate_detection(predictions: &[Vec<BoundingBox>], truths: &[Vec<BoundingBox>], iou_match: f64) -> DetectionEval {
    let n_truth: usize = truths.iter().map(Vec::len).sum();
    let matched = match_predictions(predictions, truths, iou_match);
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, &(score, hit)) in matched.iter().enumerate() {
        seen += 1;
        tp += hit as usize;
        let group_ends = matched.get(i + 1).is_none_or(|next| next.0 != score);
        if group_ends {
            curve.push(PrPoint {
                threshold: score,
                precision: tp as f64 / seen as f64,
                recall: if n_truth == 0 { 0.0 } else { tp as f64 / n_truth as f64 },
            });
        }
    }
    let recall_undefined = n_truth == 0;
    DetectionEval {
        ap: if recall_undefined { 0.0 } else { trapezoid_ap(&curve) },
        iou_match,
        truths: n_truth,
        predictions: matched.len(),
        true_positives: tp,
        recall_undefined,
        curve,
    }
}

pub fn write_detections_csv(path: impl AsRef<Path>, rows: &[(String, Vec<BoundingBox>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "x", "y", "w", "h", "score"])?;
    for (scene, boxes) in rows {
        for b in boxes {
            w.write_record([scene.clone(), b.x.to_string(), b.y.to_string(), b.w.to_string(), b.h.to_string(), b.score.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pr_csv(path: impl AsRef<Path>, curve: &[PrPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
