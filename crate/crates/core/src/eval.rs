//! AP@R40 evaluation of 3D detections against ground truth.

use serde::{Deserialize, Serialize};

use crate::geometry::Box3D;
use crate::kitti::{Category, Object3D};

pub type EvalResult<T> = Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("AP undefined: no ground-truth objects at all")]
    NoGroundTruth,
    #[error("detection score {0} outside [0, 1]")]
    BadScore(f64),
}

/// A scored 3D detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: Category,
    pub score: f64,
    pub box3d: Box3D,
}

impl Detection {
    pub fn validate(&self) -> EvalResult<()> {
        if !(0.0..=1.0).contains(&self.score) || !self.score.is_finite() {
            return Err(EvalError::BadScore(self.score));
        }
        Ok(())
    }
}

/// Drops detections with confidence strictly below `tau` (a boundary score of
/// exactly `tau` is kept).
pub fn filter_by_confidence(dets: Vec<Detection>, tau: f64) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.score >= tau).collect()
}

/// The 40 recall positions {1/40, ..., 40/40}.
const R40: usize = 40;

/// Average precision at 40 recall positions, averaged over the categories
/// present in the ground truth, as a percentage.
///
/// Detections are consumed in descending score order; each ground truth can
/// match at most one detection (greedy, highest IoU above the threshold).
/// Precision is right-interpolated at each recall position.
pub fn ap_r40(
    dets_per_scene: &[Vec<Detection>],
    gts_per_scene: &[Vec<Object3D>],
    iou_fn: impl Fn(&Box3D, &Box3D) -> f64,
    iou_threshold: f64,
) -> EvalResult<f64> {
    let total_gts: usize = gts_per_scene.iter().map(Vec::len).sum();
    if total_gts == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut categories: Vec<Category> = gts_per_scene
        .iter()
        .flatten()
        .map(|g| g.category)
        .collect();
    categories.sort_by_key(|c| c.index());
    categories.dedup();

    let mut ap_sum = 0.0;
    for cat in &categories {
        ap_sum += ap_single_category(dets_per_scene, gts_per_scene, &iou_fn, iou_threshold, *cat);
    }
    Ok(100.0 * ap_sum / categories.len() as f64)
}

fn ap_single_category(
    dets_per_scene: &[Vec<Detection>],
    gts_per_scene: &[Vec<Object3D>],
    iou_fn: &impl Fn(&Box3D, &Box3D) -> f64,
    iou_threshold: f64,
    category: Category,
) -> f64 {
    let n_gt: usize = gts_per_scene
        .iter()
        .flatten()
        .filter(|g| g.category == category)
        .count();
    if n_gt == 0 {
        return 0.0;
    }

    // (score, scene, det index), sorted by score descending with a
    // deterministic tie order
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (s, dets) in dets_per_scene.iter().enumerate() {
        for (d, det) in dets.iter().enumerate() {
            if det.category == category {
                ranked.push((det.score, s, d));
            }
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut gt_used: Vec<Vec<bool>> = gts_per_scene.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for &(_, scene, det_idx) in &ranked {
        let det = &dets_per_scene[scene][det_idx];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts_per_scene[scene].iter().enumerate() {
            if gt.category != category || gt_used[scene][gi] {
                continue;
            }
            let iou = iou_fn(&det.box3d, &gt.box3d());
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[scene][gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    // precision/recall prefix curve
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        let precision = tp as f64 / (i + 1) as f64;
        let recall = tp as f64 / n_gt as f64;
        curve.push((recall, precision));
    }

    // right-interpolated precision at recalls {1/40 .. 40/40}
    let mut ap = 0.0;
    for r in 1..=R40 {
        let target = r as f64 / R40 as f64;
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec + 1e-12 >= target)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        ap += p;
    }
    ap / R40 as f64
}
