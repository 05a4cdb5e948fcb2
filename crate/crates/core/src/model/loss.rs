//! Loss terms: detection on matched learnable queries, reconstruction on the
//! noisy track, IoU-weighted forward-looking distillation, and the weighted
//! overall loss.

use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::denoising::{kl_loss, NoisyQuerySets};
use crate::kitti::{Object3D, NUM_CATEGORIES};
use crate::matching::Assignment;
use crate::numeric::{focal_loss_per_row, NumericResult, Tape, Tensor, Var};

use super::decoder::{DecodedHeads, SceneForward};
use super::params::ParamVars;
use super::ModelResult;

/// Overall-loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self { lambda1: cfg.lambda1, lambda2: cfg.lambda2, lambda3: cfg.lambda3, beta: cfg.beta }
    }
}

/// Scalar values of every loss component (for logging).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub l_det: f64,
    pub l_res: f64,
    pub l_kl: f64,
    pub l_dis: f64,
    pub l_overall: f64,
}

/// Matched learnable rows in deterministic order: groups ascending, pairs by
/// prediction index. Returns (global row, gt index) pairs.
pub fn matched_rows(assignments: &[Assignment], n_queries: usize) -> Vec<(usize, usize)> {
    let mut rows = Vec::new();
    for (g, a) in assignments.iter().enumerate() {
        for &(pred, gt) in &a.pairs {
            rows.push((g * n_queries + pred, gt));
        }
    }
    rows
}

fn column(values: impl Iterator<Item = f64>) -> Tensor {
    let data: Vec<f64> = values.collect();
    Tensor::new(vec![data.len(), 1], data).expect("column shape")
}

/// Mean over rows of the per-pair L1 between a gathered head column block and
/// ground-truth constants.
fn l1_term(pred: &Var, gt: &Tensor, tape: &Tape) -> NumericResult<Var> {
    let m = pred.shape()[0] as f64;
    let g = tape.constant(gt.clone());
    Ok(pred.sub(&g)?.abs().sum().scale(1.0 / m))
}

/// Differentiable mean (1 - GIoU) between predicted center+edges and
/// ground-truth boxes.
fn giou_term(
    center: &Var,
    lrtb: &Var,
    gts: &[&Object3D],
    tape: &Tape,
) -> NumericResult<Var> {
    let m = gts.len();
    let cx = center.slice_cols(0, 1)?;
    let cy = center.slice_cols(1, 1)?;
    let el = lrtb.slice_cols(0, 1)?;
    let er = lrtb.slice_cols(1, 1)?;
    let et = lrtb.slice_cols(2, 1)?;
    let eb = lrtb.slice_cols(3, 1)?;

    let x1p = cx.sub(&el)?;
    let x2p = cx.add(&er)?;
    let y1p = cy.sub(&et)?;
    let y2p = cy.add(&eb)?;

    let x1g = tape.constant(column(gts.iter().map(|g| g.center_proj.0 - g.box2d.l)));
    let x2g = tape.constant(column(gts.iter().map(|g| g.center_proj.0 + g.box2d.r)));
    let y1g = tape.constant(column(gts.iter().map(|g| g.center_proj.1 - g.box2d.t)));
    let y2g = tape.constant(column(gts.iter().map(|g| g.center_proj.1 + g.box2d.b)));
    let area_g = tape.constant(column(gts.iter().map(|g| g.box2d.area())));

    let iw = x2p.min_elem(&x2g)?.sub(&x1p.max_elem(&x1g)?)?.relu();
    let ih = y2p.min_elem(&y2g)?.sub(&y1p.max_elem(&y1g)?)?.relu();
    let inter = iw.mul(&ih)?;
    let area_p = el.add(&er)?.mul(&et.add(&eb)?)?;
    let union = area_p.add(&area_g)?.sub(&inter)?;

    let hull_w = x2p.max_elem(&x2g)?.sub(&x1p.min_elem(&x1g)?)?;
    let hull_h = y2p.max_elem(&y2g)?.sub(&y1p.min_elem(&y1g)?)?;
    let hull = hull_w.mul(&hull_h)?;

    let giou = inter.div(&union)?.sub(&hull.sub(&union)?.div(&hull)?)?;
    Ok(giou.neg().add_scalar(1.0).sum().scale(1.0 / m as f64))
}

/// Regression terms shared by the detection and reconstruction losses:
/// L1 center + L1 lrtb + (1 - GIoU) + L1 dims + L1 depth + bin CE +
/// L1 residual, each averaged over the given (row, target) pairs.
fn regression_terms(
    heads: &DecodedHeads,
    rows: &[usize],
    targets: &[&Object3D],
    tape: &Tape,
) -> NumericResult<Var> {
    let m = rows.len() as f64;
    let center = heads.center.gather_rows(rows)?;
    let lrtb = heads.lrtb.gather_rows(rows)?;
    let dims = heads.dims.gather_rows(rows)?;
    let depth = heads.depth.gather_rows(rows)?;
    let bins = heads.bin_logits.gather_rows(rows)?;
    let residual = heads.residual.gather_rows(rows)?;

    let gt_center = Tensor::new(
        vec![targets.len(), 2],
        targets.iter().flat_map(|g| [g.center_proj.0, g.center_proj.1]).collect(),
    )?;
    let gt_lrtb = Tensor::new(
        vec![targets.len(), 4],
        targets.iter().flat_map(|g| [g.box2d.l, g.box2d.r, g.box2d.t, g.box2d.b]).collect(),
    )?;
    let gt_dims = Tensor::new(
        vec![targets.len(), 3],
        targets.iter().flat_map(|g| g.dims).collect(),
    )?;
    let gt_depth = column(targets.iter().map(|g| g.depth));
    let gt_residual = column(targets.iter().map(|g| g.orientation_residual));
    let gt_bins: Vec<usize> = targets.iter().map(|g| g.orientation_bin).collect();

    let center_l1 = l1_term(&center, &gt_center, tape)?;
    let lrtb_l1 = l1_term(&lrtb, &gt_lrtb, tape)?;
    let giou = giou_term(&center, &lrtb, targets, tape)?;
    let dims_l1 = l1_term(&dims, &gt_dims, tape)?;
    let depth_l1 = l1_term(&depth, &gt_depth, tape)?;
    let bin_ce = bins.log_softmax()?.take_per_row(&gt_bins)?.neg().sum().scale(1.0 / m);
    let residual_l1 = l1_term(&residual, &gt_residual, tape)?;

    center_l1
        .add(&lrtb_l1)?
        .add(&giou)?
        .add(&dims_l1)?
        .add(&depth_l1)?
        .add(&bin_ce)?
        .add(&residual_l1)
}

/// Detection loss on the learnable track: focal classification over every
/// query (unmatched rows target the background class) plus regression terms
/// on the matched pairs.
pub fn detection_loss(
    heads: &DecodedHeads,
    assignments: &[Assignment],
    gts: &[Object3D],
    n_queries: usize,
    cfg: &ScenarioConfig,
    tape: &Tape,
) -> ModelResult<Var> {
    let rows_total = heads.class_logits.shape()[0];
    let matched = matched_rows(assignments, n_queries);

    let mut class_targets = vec![NUM_CATEGORIES; rows_total];
    let mut alphas = vec![1.0 - cfg.focal_alpha; rows_total];
    for &(row, gt) in &matched {
        class_targets[row] = gts[gt].category.index();
        alphas[row] = cfg.focal_alpha;
    }
    let focal = focal_loss_per_row(&heads.class_logits, &class_targets, &alphas, cfg.focal_gamma)?
        .mean();

    let rows: Vec<usize> = matched.iter().map(|&(r, _)| r).collect();
    let targets: Vec<&Object3D> = matched.iter().map(|&(_, g)| &gts[g]).collect();
    let regression = regression_terms(heads, &rows, &targets, tape)?;
    Ok(focal.add(&regression)?)
}

/// Reconstruction loss on the noisy track: every row has a target by
/// construction, so the focal term sees no background rows and no matching
/// is involved.
pub fn reconstruction_loss(
    heads: &DecodedHeads,
    sets: &NoisyQuerySets,
    cfg: &ScenarioConfig,
    tape: &Tape,
) -> ModelResult<Var> {
    let rows_total = heads.class_logits.shape()[0];
    let per_group = sets.noisy[0].len();
    let targets: Vec<&Object3D> =
        (0..rows_total).map(|r| sets.target_of_row(r % per_group)).collect();

    let class_targets: Vec<usize> = targets.iter().map(|t| t.category.index()).collect();
    let alphas = vec![cfg.focal_alpha; rows_total];
    let focal = focal_loss_per_row(&heads.class_logits, &class_targets, &alphas, cfg.focal_gamma)?
        .mean();

    let rows: Vec<usize> = (0..rows_total).collect();
    let regression = regression_terms(heads, &rows, &targets, tape)?;
    Ok(focal.add(&regression)?)
}

/// KL term of the denoising loss (zero for the deterministic autoencoder
/// path).
pub fn kl_term(sets: Option<&NoisyQuerySets>, tape: &Tape) -> NumericResult<Var> {
    match sets.and_then(|s| s.mu.as_ref().zip(s.log_var.as_ref())) {
        Some((mu, lv)) => kl_loss(mu, lv),
        None => Ok(tape.constant_scalar(0.0)),
    }
}

/// Forward-looking distillation: every non-final layer's queries are refined
/// by the shared two-layer MLP and pulled toward the (stop-gradient) final
/// layer queries, weighted per query by the final prediction's 3D IoU with
/// its ground truth.
#[allow(clippy::too_many_arguments)]
pub fn distillation_loss(
    fwd: &SceneForward,
    pv: &ParamVars,
    learn_rows: &[usize],
    learn_weights: &[f64],
    teacher_learnable: &Tensor,
    noisy_weights: Option<&[f64]>,
    teacher_noisy: Option<&Tensor>,
    tape: &Tape,
) -> ModelResult<Var> {
    let d = teacher_learnable.shape()[1];
    let ones_over_d = tape.constant(Tensor::full(vec![d, 1], 1.0 / d as f64));
    let f_q = |x: &Var| -> NumericResult<Var> {
        x.matmul(&pv.v("distill.w1"))?
            .add_row(&pv.v("distill.b1"))?
            .gelu()
            .matmul(&pv.v("distill.w2"))?
            .add_row(&pv.v("distill.b2"))
    };

    let track_term = |student: &Var, rows: &[usize], weights: &[f64], teacher: &Tensor| -> NumericResult<Var> {
        let m = rows.len();
        let student_rows = student.gather_rows(rows)?;
        let teacher_rows = {
            let mut data = Vec::with_capacity(m * d);
            for &r in rows {
                for j in 0..d {
                    data.push(teacher.get2(r, j));
                }
            }
            tape.constant(Tensor::new(vec![m, d], data)?)
        };
        let diff = f_q(&student_rows)?.sub(&teacher_rows)?;
        let per_row = diff.smooth_l1().matmul(&ones_over_d)?;
        let weighted = per_row.mul_const(&column(weights.iter().copied()))?;
        Ok(weighted.sum().scale(1.0 / m as f64))
    };

    let mut total = tape.constant_scalar(0.0);
    for layer in fwd.layers.iter().take(fwd.layers.len() - 1) {
        if !learn_rows.is_empty() {
            total = total.add(&track_term(
                &layer.learnable,
                learn_rows,
                learn_weights,
                teacher_learnable,
            )?)?;
        }
        if let (Some(noisy), Some(weights), Some(teacher)) =
            (&layer.noisy, noisy_weights, teacher_noisy)
        {
            let all_rows: Vec<usize> = (0..noisy.shape()[0]).collect();
            total = total.add(&track_term(noisy, &all_rows, weights, teacher)?)?;
        }
    }
    Ok(total)
}

/// L_overall = lambda1 * L_det + lambda2 * (L_res + beta * L_KL)
///           + lambda3 * L_dis.
pub fn overall_loss(
    l_det: &Var,
    l_res: &Var,
    l_kl: &Var,
    l_dis: &Var,
    w: &LossWeights,
) -> NumericResult<Var> {
    let dn = l_res.add(&l_kl.scale(w.beta))?;
    l_det
        .scale(w.lambda1)
        .add(&dn.scale(w.lambda2))?
        .add(&l_dis.scale(w.lambda3))
}
