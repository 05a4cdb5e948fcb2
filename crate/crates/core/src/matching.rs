//! 3D-aware bipartite matching: per-pair composite costs (2D terms plus
//! scheduler-gated 3D terms) and an exact Hungarian solver.

use serde::{Deserialize, Serialize};

use crate::geometry::{giou_2d, Box2D, GeometryError};
use crate::kitti::{Object3D, NUM_CATEGORIES};

pub type MatchingResult<T> = Result<T, MatchingError>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MatchingError {
    #[error("no ground-truth objects: matching is skipped for empty images")]
    EmptyGroundTruth,
    #[error("{preds} predictions cannot cover {gts} ground truths")]
    TooFewPredictions { preds: usize, gts: usize },
    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),
    #[error("non-finite cost at pair ({pred}, {gt})")]
    NonFiniteCost { pred: usize, gt: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Query-side operand of the matching cost: the same semantic slots as
/// `Object3D`, soft where the model predicts distributions. The class simplex
/// spans the categories plus a final background slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_probs: Vec<f64>,
    pub center_proj: (f64, f64),
    pub box2d: Box2D,
    pub dims: [f64; 3],
    pub depth: f64,
    pub orientation_bin_probs: Vec<f64>,
    pub orientation_residual: f64,
}

impl Prediction {
    /// One-hot pseudo-prediction from a label record (used by the `match` CLI
    /// and fixtures).
    pub fn from_object(obj: &Object3D, orientation_bins: usize) -> Self {
        let mut class_probs = vec![0.0; NUM_CATEGORIES + 1];
        class_probs[obj.category.index()] = 1.0;
        let mut orientation_bin_probs = vec![0.0; orientation_bins];
        orientation_bin_probs[obj.orientation_bin] = 1.0;
        Self {
            class_probs,
            center_proj: obj.center_proj,
            box2d: obj.box2d,
            dims: obj.dims,
            depth: obj.depth,
            orientation_bin_probs,
            orientation_residual: obj.orientation_residual,
        }
    }

    pub fn validate(&self) -> MatchingResult<()> {
        let sum_c: f64 = self.class_probs.iter().sum();
        if (sum_c - 1.0).abs() > 1e-9 {
            return Err(MatchingError::InvalidPrediction(format!(
                "class probs sum to {}",
                sum_c
            )));
        }
        let sum_b: f64 = self.orientation_bin_probs.iter().sum();
        if (sum_b - 1.0).abs() > 1e-9 {
            return Err(MatchingError::InvalidPrediction(format!(
                "orientation bin probs sum to {}",
                sum_b
            )));
        }
        if self.depth <= 0.0 {
            return Err(MatchingError::InvalidPrediction(format!("depth {}", self.depth)));
        }
        Ok(())
    }
}

/// Step scheduler for the 3D cost weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub epsilon: f64,
    pub trigger_epoch: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, trigger_epoch: 85 }
    }
}

/// 0 before the trigger epoch, epsilon afterwards.
pub fn gamma(epoch: usize, cfg: &SchedulerConfig) -> f64 {
    if epoch < cfg.trigger_epoch {
        0.0
    } else {
        cfg.epsilon
    }
}

/// Matching-cost weights; the 2D set follows the baseline, the 3D components
/// default to unit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub lambda_cls: f64,
    pub lambda_proj: f64,
    pub lambda_lrtb: f64,
    pub lambda_giou: f64,
    pub w_size3d: f64,
    pub w_orien: f64,
    pub w_depth: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_proj: 10.0,
            lambda_lrtb: 5.0,
            lambda_giou: 2.0,
            w_size3d: 1.0,
            w_orien: 1.0,
            w_depth: 1.0,
        }
    }
}

/// Raw per-pair cost components, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Negative predicted probability of the ground-truth class.
    pub cls: f64,
    /// L1 distance between projected centers.
    pub proj: f64,
    /// L1 distance between (l, r, t, b) edge vectors.
    pub lrtb: f64,
    /// 1 − GIoU of the 2D boxes.
    pub giou: f64,
    /// L1 distance between 3D dims.
    pub size3d: f64,
    /// (1 − p(gt bin)) + L1 residual difference.
    pub orien: f64,
    /// L1 depth difference.
    pub depth: f64,
}

impl CostBreakdown {
    pub fn weighted_2d(&self, w: &CostWeights) -> f64 {
        w.lambda_cls * self.cls
            + w.lambda_proj * self.proj
            + w.lambda_lrtb * self.lrtb
            + w.lambda_giou * self.giou
    }

    pub fn weighted_3d(&self, w: &CostWeights) -> f64 {
        w.w_size3d * self.size3d + w.w_orien * self.orien + w.w_depth * self.depth
    }

    /// Matrix entry for a given scheduler weight.
    pub fn combined(&self, w: &CostWeights, gamma: f64) -> f64 {
        self.weighted_2d(w) + gamma * self.weighted_3d(w)
    }
}

/// 2D matching cost: class, projected center, box edges, GIoU.
pub fn cost_2d(
    pred: &Prediction,
    gt: &Object3D,
    w: &CostWeights,
) -> MatchingResult<(f64, CostBreakdown)> {
    let cls = -pred.class_probs[gt.category.index()];
    let proj =
        (pred.center_proj.0 - gt.center_proj.0).abs() + (pred.center_proj.1 - gt.center_proj.1).abs();
    let lrtb = (pred.box2d.l - gt.box2d.l).abs()
        + (pred.box2d.r - gt.box2d.r).abs()
        + (pred.box2d.t - gt.box2d.t).abs()
        + (pred.box2d.b - gt.box2d.b).abs();
    let giou = 1.0 - giou_2d(&pred.box2d, pred.center_proj, &gt.box2d, gt.center_proj)?;
    let parts = CostBreakdown { cls, proj, lrtb, giou, ..CostBreakdown::default() };
    Ok((parts.weighted_2d(w), parts))
}

/// 3D matching cost: size, orientation, depth.
pub fn cost_3d(pred: &Prediction, gt: &Object3D, w: &CostWeights) -> (f64, CostBreakdown) {
    let size3d = (0..3).map(|i| (pred.dims[i] - gt.dims[i]).abs()).sum();
    let bin_prob = pred.orientation_bin_probs.get(gt.orientation_bin).copied().unwrap_or(0.0);
    let orien = (1.0 - bin_prob) + (pred.orientation_residual - gt.orientation_residual).abs();
    let depth = (pred.depth - gt.depth).abs();
    let parts = CostBreakdown { size3d, orien, depth, ..CostBreakdown::default() };
    (parts.weighted_3d(w), parts)
}

/// Pairwise matching costs with per-pair component breakdowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub n_pred: usize,
    pub n_gt: usize,
    /// Row-major (pred-major) combined costs.
    pub values: Vec<f64>,
    pub breakdown: Vec<CostBreakdown>,
    pub gamma: f64,
    pub weights: CostWeights,
}

impl CostMatrix {
    pub fn at(&self, pred: usize, gt: usize) -> f64 {
        self.values[pred * self.n_gt + gt]
    }

    pub fn breakdown_at(&self, pred: usize, gt: usize) -> &CostBreakdown {
        &self.breakdown[pred * self.n_gt + gt]
    }

    /// Total cost of a pair set, summed in ascending ground-truth order so
    /// equal assignments compare bit-identically.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        let mut sorted: Vec<(usize, usize)> = pairs.to_vec();
        sorted.sort_by_key(|&(_, gt)| gt);
        sorted.iter().map(|&(p, g)| self.at(p, g)).sum()
    }
}

/// Builds the full cost matrix at a given epoch: C = C2D + gamma(t) * C3D.
pub fn build_cost_matrix(
    preds: &[Prediction],
    gts: &[Object3D],
    epoch: usize,
    scheduler: &SchedulerConfig,
    weights: &CostWeights,
) -> MatchingResult<CostMatrix> {
    if gts.is_empty() {
        return Err(MatchingError::EmptyGroundTruth);
    }
    if preds.len() < gts.len() {
        return Err(MatchingError::TooFewPredictions { preds: preds.len(), gts: gts.len() });
    }
    let g = gamma(epoch, scheduler);
    let mut values = Vec::with_capacity(preds.len() * gts.len());
    let mut breakdown = Vec::with_capacity(preds.len() * gts.len());
    for (pi, pred) in preds.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let (_, parts2d) = cost_2d(pred, gt, weights)?;
            let (_, parts3d) = cost_3d(pred, gt, weights);
            let parts = CostBreakdown {
                cls: parts2d.cls,
                proj: parts2d.proj,
                lrtb: parts2d.lrtb,
                giou: parts2d.giou,
                size3d: parts3d.size3d,
                orien: parts3d.orien,
                depth: parts3d.depth,
            };
            let value = parts.combined(weights, g);
            if !value.is_finite() {
                return Err(MatchingError::NonFiniteCost { pred: pi, gt: gi });
            }
            values.push(value);
            breakdown.push(parts);
        }
    }
    Ok(CostMatrix {
        n_pred: preds.len(),
        n_gt: gts.len(),
        values,
        breakdown,
        gamma: g,
        weights: *weights,
    })
}

/// Result of the Hungarian assignment: a partial injection covering every
/// ground truth, pairs sorted by prediction index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub total_cost: f64,
}

/// Exact minimum-cost assignment (Jonker–Volgenant style shortest augmenting
/// paths on the square-padded matrix), then a lexicographic tie
/// canonicalization: among cost-equal optima, lower prediction indices match
/// first, each taking the lowest compatible ground-truth index.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let n_pred = costs.n_pred;
    let n_gt = costs.n_gt;
    // Square matrix: rows = predictions, real gt columns then zero-cost
    // dummy columns standing for "unmatched".
    let s = n_pred;
    let at = |i: usize, j: usize| -> f64 {
        if j < n_gt {
            costs.at(i, j)
        } else {
            0.0
        }
    };

    // Shortest-augmenting-path LAP over columns (1-indexed internals).
    let mut u = vec![0.0f64; s + 1];
    let mut v = vec![0.0f64; s + 1];
    let mut matched_row = vec![0usize; s + 1]; // column -> row (1-indexed, 0 = free)
    for row in 1..=s {
        let mut j0 = 0usize;
        matched_row[j0] = row;
        let mut min_to = vec![f64::INFINITY; s + 1];
        let mut prev = vec![0usize; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=s {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_to[j] {
                    min_to[j] = cur;
                    prev[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // augment along the found path
        while j0 != 0 {
            let j1 = prev[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut pred_to_col = vec![usize::MAX; s];
    for j in 1..=s {
        let i = matched_row[j];
        if i != 0 {
            pred_to_col[i - 1] = j - 1;
        }
    }

    let base_pairs: Vec<(usize, usize)> = (0..s)
        .filter(|&i| pred_to_col[i] < n_gt)
        .map(|i| (i, pred_to_col[i]))
        .collect();
    let base_total = costs.total(&base_pairs);

    // Lexicographic canonicalization over the zero-slack (tie) subgraph.
    let canonical = canonicalize_ties(costs, &u, &v, &pred_to_col);
    let pairs = match canonical {
        Some(p) if costs.total(&p) == base_total => p,
        _ => base_pairs,
    };

    let mut pairs = pairs;
    pairs.sort_by_key(|&(p, _)| p);
    let matched: std::collections::HashSet<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let unmatched_preds = (0..n_pred).filter(|p| !matched.contains(p)).collect();
    let total_cost = costs.total(&pairs);
    Assignment { pairs, unmatched_preds, total_cost }
}

/// Greedy lexicographic matching over near-zero-slack edges: prediction
/// indices ascending, real ground truths (ascending) preferred over staying
/// unmatched. Returns None when the tie graph admits no perfect matching or
/// no ties exist (the caller keeps the base assignment in either case).
fn canonicalize_ties(
    costs: &CostMatrix,
    u: &[f64],
    v: &[f64],
    pred_to_col: &[usize],
) -> Option<Vec<(usize, usize)>> {
    let s = costs.n_pred;
    let n_gt = costs.n_gt;
    let scale: f64 = costs.values.iter().fold(0.0, |m, &x| m.max(x.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let at = |i: usize, j: usize| if j < n_gt { costs.at(i, j) } else { 0.0 };

    // tie edges per prediction; dummy columns collapse into one bucket (col = n_gt)
    let mut edges: Vec<Vec<usize>> = vec![Vec::new(); s];
    let mut has_choice = false;
    for i in 0..s {
        let mut dummy_added = false;
        for j in 0..s {
            let slack = at(i, j) - u[i + 1] - v[j + 1];
            if slack.abs() <= tol || pred_to_col[i] == j {
                let key = j.min(n_gt);
                if key == n_gt {
                    if !dummy_added {
                        edges[i].push(n_gt);
                        dummy_added = true;
                    }
                } else {
                    edges[i].push(key);
                }
            }
        }
        edges[i].sort_unstable();
        edges[i].dedup();
        if edges[i].len() > 1 {
            has_choice = true;
        }
    }
    if !has_choice {
        return None;
    }

    // capacity: n_gt single-slot columns plus one dummy bucket with s - n_gt slots
    let mut fixed: Vec<usize> = Vec::with_capacity(s);
    let mut gt_taken = vec![false; n_gt];
    let mut dummy_left = s - n_gt;
    for i in 0..s {
        let mut chosen = None;
        for &j in &edges[i] {
            if j < n_gt && gt_taken[j] {
                continue;
            }
            if j == n_gt && dummy_left == 0 {
                continue;
            }
            // feasibility: can the remaining predictions still cover everything?
            let mut taken = gt_taken.clone();
            let mut dleft = dummy_left;
            if j < n_gt {
                taken[j] = true;
            } else {
                dleft -= 1;
            }
            if remaining_feasible(&edges, i + 1, &taken, dleft, n_gt) {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen?;
        fixed.push(j);
        if j < n_gt {
            gt_taken[j] = true;
        } else {
            dummy_left -= 1;
        }
    }
    Some(
        fixed
            .iter()
            .enumerate()
            .filter(|&(_, &j)| j < n_gt)
            .map(|(i, &j)| (i, j))
            .collect(),
    )
}

/// Kuhn-style feasibility: predictions `from..` must all be matchable to
/// distinct free ground truths or remaining dummy slots. The dummy bucket is
/// expanded into `dummy_slots` interchangeable virtual columns so augmenting
/// paths can displace rows off it.
fn remaining_feasible(
    edges: &[Vec<usize>],
    from: usize,
    gt_taken: &[bool],
    dummy_slots: usize,
    n_gt: usize,
) -> bool {
    let s = edges.len();
    if from == s {
        return true;
    }
    let n_cols = n_gt + dummy_slots;
    let mut col_owner: Vec<Option<usize>> = vec![None; n_cols];

    fn try_assign(
        row: usize,
        edges: &[Vec<usize>],
        gt_taken: &[bool],
        col_owner: &mut [Option<usize>],
        n_gt: usize,
        visited: &mut [bool],
    ) -> bool {
        // candidate columns: real-gt tie edges plus, if the row has a dummy
        // edge, every virtual dummy column
        let n_cols = col_owner.len();
        let candidates = edges[row]
            .iter()
            .flat_map(|&j| {
                if j < n_gt {
                    j..j + 1
                } else {
                    n_gt..n_cols
                }
            })
            .collect::<Vec<usize>>();
        for j in candidates {
            if j < n_gt && gt_taken[j] {
                continue;
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            match col_owner[j] {
                None => {
                    col_owner[j] = Some(row);
                    return true;
                }
                Some(other) => {
                    if try_assign(other, edges, gt_taken, col_owner, n_gt, visited) {
                        col_owner[j] = Some(row);
                        return true;
                    }
                }
            }
        }
        false
    }

    for row in from..s {
        let mut visited = vec![false; n_cols];
        if !try_assign(row, edges, gt_taken, &mut col_owner, n_gt, &mut visited) {
            return false;
        }
    }
    true
}
