//! Training loop over synthetic scenes: per-step forward, matching, losses,
//! Adam updates, diagnostics, plus the inference path and the whole-model
//! finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_entropy, build_mask, AttentionRecord, EntropyRegion};
use crate::config::ScenarioConfig;
use crate::denoising::{make_noisy_query_sets, FrozenNoise, NoisyQuerySets};
use crate::eval::Detection;
use crate::geometry::{invert_projection, Box3D};
use crate::kitti::{compose_yaw, normalize_angle, Scene};
use crate::matching::{build_cost_matrix, hungarian, Assignment, CostWeights, Prediction};
use crate::numeric::{check_gradients, Tape, Tensor, Var};

use super::decoder::{
    decoder_forward, dropout_plan_shapes, predictions_from_heads, SceneForward,
};
use super::loss::{
    detection_loss, distillation_loss, kl_term, matched_rows, overall_loss, reconstruction_loss,
    LossValues, LossWeights,
};
use super::params::{ParamStore, ParamVars};
use super::{ModelError, ModelResult};

/// Training variants mirroring the component ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Variational denoising + 3D-aware matching + distillation.
    Full,
    /// Deterministic (autoencoder) denoising instead of variational.
    Ae,
    /// No denoising machinery at all.
    NoDn,
    /// 3D cost terms hard-zeroed in matching (2D-only).
    No3dm,
    /// Distillation disabled.
    NoFld,
}

impl Variant {
    pub fn uses_denoising(&self) -> bool {
        !matches!(self, Variant::NoDn)
    }

    pub fn variational(&self) -> bool {
        matches!(self, Variant::Full | Variant::No3dm | Variant::NoFld)
    }

    pub fn uses_distillation(&self) -> bool {
        !matches!(self, Variant::NoFld)
    }

    pub fn zero_3d_cost(&self) -> bool {
        matches!(self, Variant::No3dm)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Ae => "ae",
            Variant::NoDn => "no-dn",
            Variant::No3dm => "no-3dm",
            Variant::NoFld => "no-fld",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "ae" => Ok(Variant::Ae),
            "no-dn" => Ok(Variant::NoDn),
            "no-3dm" => Ok(Variant::No3dm),
            "no-fld" => Ok(Variant::NoFld),
            other => Err(format!(
                "unknown variant '{}' (expected full | ae | no-dn | no-3dm | no-fld)",
                other
            )),
        }
    }
}

/// Everything a forward pass consumed that must be replayed bit-exactly to
/// re-evaluate the same mathematical function: noise draws, the assignment,
/// the detached distillation targets and weights, and dropout masks.
#[derive(Clone)]
pub struct ForwardAux {
    pub epoch: usize,
    pub noise: Option<FrozenNoise>,
    pub assignments: Vec<Assignment>,
    pub teacher_learnable: Tensor,
    pub teacher_noisy: Option<Tensor>,
    pub iou_learnable: Vec<f64>,
    pub iou_noisy: Vec<f64>,
    pub dropout: Option<Vec<Tensor>>,
}

/// Per-step diagnostics extracted from the attention records.
#[derive(Debug, Clone, Default)]
pub struct EntropyStats {
    pub full: Option<f64>,
    pub noisy_to_learnable: Option<f64>,
    pub per_layer_full: Vec<f64>,
}

pub struct StepOutput {
    pub loss: Var,
    pub values: LossValues,
    pub assignments: Vec<Assignment>,
    pub aux: ForwardAux,
    pub entropy: EntropyStats,
}

/// Decodes a prediction into a metric-space box using the scene camera.
pub fn prediction_box3d(pred: &Prediction, scene: &Scene, orientation_bins: usize) -> Box3D {
    let center = invert_projection(pred.center_proj, pred.depth, &scene.calib, scene.image_size);
    let bin = pred
        .orientation_bin_probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let yaw = normalize_angle(compose_yaw(bin, pred.orientation_residual, orientation_bins));
    Box3D { center, dims: pred.dims, yaw }
}

fn entropy_stats(layers: &[Vec<AttentionRecord>]) -> EntropyStats {
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut full_total = 0.0;
    let mut block_total = 0.0;
    let mut count = 0usize;
    for records in layers {
        let mut layer_total = 0.0;
        for rec in records {
            let f = attention_entropy(rec, EntropyRegion::Full);
            layer_total += f;
            full_total += f;
            block_total += attention_entropy(rec, EntropyRegion::NoisyToLearnable);
            count += 1;
        }
        if !records.is_empty() {
            per_layer.push(layer_total / records.len() as f64);
        }
    }
    if count == 0 {
        EntropyStats::default()
    } else {
        EntropyStats {
            full: Some(full_total / count as f64),
            noisy_to_learnable: Some(block_total / count as f64),
            per_layer_full: per_layer,
        }
    }
}

fn effective_cost_weights(cfg: &ScenarioConfig, variant: Variant) -> CostWeights {
    let mut w = cfg.cost_weights();
    if variant.zero_3d_cost() {
        w.w_size3d = 0.0;
        w.w_orien = 0.0;
        w.w_depth = 0.0;
    }
    w
}

/// One scene's forward pass and loss. With `aux = None` the step draws fresh
/// noise, matches on the live predictions and detaches live distillation
/// targets, returning them all in the output aux; with `aux = Some` those
/// frozen quantities are replayed, which makes the evaluated function
/// differentiable-in-parameters for the finite-difference oracle.
pub fn scene_step(
    tape: &Tape,
    pv: &ParamVars,
    cfg: &ScenarioConfig,
    variant: Variant,
    scene: &Scene,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    aux_in: Option<&ForwardAux>,
) -> ModelResult<StepOutput> {
    if scene.k() == 0 {
        return Err(ModelError::Precondition("scene has no objects".into()));
    }
    let dcfg = cfg.decoder();
    let epoch = aux_in.map_or(epoch, |a| a.epoch);

    // denoising side
    let noise_cfg = cfg.noise(0);
    let sets: Option<NoisyQuerySets> = if variant.uses_denoising() {
        make_noisy_query_sets(
            scene,
            dcfg.groups,
            &noise_cfg,
            variant.variational(),
            &pv.embedder(),
            tape,
            rng,
            aux_in.and_then(|a| a.noise.as_ref()),
        )?
    } else {
        None
    };
    let mask = match &sets {
        Some(_) => Some(build_mask(scene.k(), dcfg.noisy_groups, dcfg.n_queries)?),
        None => None,
    };

    // dropout plan
    let dropout: Option<Vec<Tensor>> = if dcfg.dropout > 0.0 {
        match aux_in {
            Some(a) => a.dropout.clone(),
            None => {
                let shapes = dropout_plan_shapes(&dcfg, scene.k(), sets.is_some());
                Some(
                    shapes
                        .into_iter()
                        .map(|shape| {
                            let n: usize = shape.iter().product();
                            let data = (0..n)
                                .map(|_| if rng.gen_range(0.0..1.0) < dcfg.dropout { 0.0 } else { 1.0 })
                                .collect();
                            Tensor::new(shape, data).expect("dropout mask shape")
                        })
                        .collect(),
                )
            }
        }
    } else {
        None
    };

    let features = scene.synthetic_features(dcfg.feature_tokens, dcfg.hidden_dim);
    let fwd = decoder_forward(
        pv,
        &dcfg,
        tape,
        &features,
        sets.as_ref(),
        mask.as_ref(),
        dropout.as_deref(),
    )?;
    let last = fwd.last();

    // per-group matching on the final learnable predictions
    let all_preds = predictions_from_heads(&last.learnable_heads, dcfg.orientation_bins);
    let assignments: Vec<Assignment> = match aux_in {
        Some(a) => a.assignments.clone(),
        None => {
            let weights = effective_cost_weights(cfg, variant);
            let mut per_group = Vec::with_capacity(dcfg.groups);
            for g in 0..dcfg.groups {
                let preds = &all_preds[g * dcfg.n_queries..(g + 1) * dcfg.n_queries];
                let matrix =
                    build_cost_matrix(preds, &scene.objects, epoch, &cfg.scheduler(), &weights)?;
                per_group.push(hungarian(&matrix));
            }
            per_group
        }
    };

    let l_det = detection_loss(
        &last.learnable_heads,
        &assignments,
        &scene.objects,
        dcfg.n_queries,
        cfg,
        tape,
    )?;

    let (l_res, l_kl) = match (&sets, &last.noisy_heads) {
        (Some(s), Some(noisy_heads)) => (
            reconstruction_loss(noisy_heads, s, cfg, tape)?,
            kl_term(sets.as_ref(), tape)?,
        ),
        _ => (tape.constant_scalar(0.0), tape.constant_scalar(0.0)),
    };

    // distillation targets and weights: frozen from aux, or detached live values
    let matched = matched_rows(&assignments, dcfg.n_queries);
    let learn_rows: Vec<usize> = matched.iter().map(|&(r, _)| r).collect();
    let (teacher_learnable, teacher_noisy, iou_learnable, iou_noisy) = match aux_in {
        Some(a) => (
            a.teacher_learnable.clone(),
            a.teacher_noisy.clone(),
            a.iou_learnable.clone(),
            a.iou_noisy.clone(),
        ),
        None => {
            let teacher_learnable = last.learnable.value();
            let teacher_noisy = last.noisy.as_ref().map(Var::value);
            let iou_learnable: Vec<f64> = matched
                .iter()
                .map(|&(row, gt)| {
                    let pred_box =
                        prediction_box3d(&all_preds[row], scene, dcfg.orientation_bins);
                    crate::geometry::iou_3d(&pred_box, &scene.objects[gt].box3d())
                })
                .collect();
            let iou_noisy: Vec<f64> = match (&sets, &last.noisy_heads) {
                (Some(s), Some(noisy_heads)) => {
                    let noisy_preds = predictions_from_heads(noisy_heads, dcfg.orientation_bins);
                    let per_group = s.noisy[0].len();
                    noisy_preds
                        .iter()
                        .enumerate()
                        .map(|(r, p)| {
                            let gt = s.target_of_row(r % per_group);
                            let pred_box = prediction_box3d(p, scene, dcfg.orientation_bins);
                            crate::geometry::iou_3d(&pred_box, &gt.box3d())
                        })
                        .collect()
                }
                _ => Vec::new(),
            };
            (teacher_learnable, teacher_noisy, iou_learnable, iou_noisy)
        }
    };

    let l_dis = if variant.uses_distillation() && dcfg.layers >= 2 {
        distillation_loss(
            &fwd,
            pv,
            &learn_rows,
            &iou_learnable,
            &teacher_learnable,
            if iou_noisy.is_empty() { None } else { Some(&iou_noisy) },
            teacher_noisy.as_ref(),
            tape,
        )?
    } else {
        tape.constant_scalar(0.0)
    };

    let weights = LossWeights::from_config(cfg);
    let loss = overall_loss(&l_det, &l_res, &l_kl, &l_dis, &weights)?;

    let values = LossValues {
        l_det: l_det.item(),
        l_res: l_res.item(),
        l_kl: l_kl.item(),
        l_dis: l_dis.item(),
        l_overall: loss.item(),
    };
    let entropy = entropy_stats(
        &fwd.layers.iter().map(|l| l.records.clone()).collect::<Vec<_>>(),
    );

    let aux = ForwardAux {
        epoch,
        noise: sets.as_ref().map(|s| FrozenNoise { noisy: s.noisy.clone(), eps: s.eps.clone() }),
        assignments: assignments.clone(),
        teacher_learnable,
        teacher_noisy,
        iou_learnable,
        iou_noisy,
        dropout,
    };

    Ok(StepOutput { loss, values, assignments, aux, entropy })
}

// ── Optimizer ──────────────────────────────────────────────────────────

/// Adam with decoupled weight decay.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = tensor.data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
    }
}

// ── Training loop ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_det: f64,
    pub l_res: f64,
    pub l_kl: f64,
    pub l_dis: f64,
    pub entropy_full: Option<f64>,
    pub entropy_noisy_to_learnable: Option<f64>,
    pub per_layer_entropy: Vec<f64>,
    pub assignment_flips: usize,
    pub lr: f64,
}

/// Assignments from one training step (one scene), per query group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAssignments {
    pub epoch: usize,
    pub scene: usize,
    pub per_group: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub variant: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub step_assignments: Vec<StepAssignments>,
    /// Overall loss at every step, in step order.
    pub step_losses: Vec<f64>,
    /// Detection loss at every step, in step order.
    pub step_det_losses: Vec<f64>,
}

pub struct TrainOutput {
    pub store: ParamStore,
    pub log: TrainLog,
}

fn lr_at(cfg: &ScenarioConfig, epoch: usize) -> f64 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr * cfg.lr_decay_rate.powi(decays as i32)
}

/// Runs the full training loop; deterministic per seed.
pub fn train(
    scenes: &[Scene],
    cfg: &ScenarioConfig,
    variant: Variant,
    seed: u64,
) -> ModelResult<TrainOutput> {
    if scenes.is_empty() {
        return Err(ModelError::Precondition("need at least one scene".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.k() == 0 {
            return Err(ModelError::Precondition(format!("scene {} has no objects", i)));
        }
        if s.k() > cfg.n_queries {
            return Err(ModelError::Precondition(format!(
                "scene {} has {} objects but only {} queries per group",
                i,
                s.k(),
                cfg.n_queries
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::init(&cfg.decoder(), rng.gen());
    let mut adam = Adam::new(&store, cfg.weight_decay);

    let mut log = TrainLog {
        variant: variant.name().into(),
        seed,
        epochs: Vec::with_capacity(cfg.epochs),
        step_assignments: Vec::with_capacity(cfg.epochs * scenes.len()),
        step_losses: Vec::with_capacity(cfg.epochs * scenes.len()),
        step_det_losses: Vec::with_capacity(cfg.epochs * scenes.len()),
    };
    let mut prev_assignments: Vec<Option<Vec<std::collections::BTreeSet<(usize, usize)>>>> =
        vec![None; scenes.len()];

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut sums = LossValues::default();
        let mut entropy_full = 0.0;
        let mut entropy_block = 0.0;
        let mut entropy_count = 0usize;
        let mut per_layer: Vec<f64> = vec![0.0; cfg.decoder_layers];
        let mut per_layer_count = 0usize;
        let mut flips = 0usize;

        for (scene_idx, scene) in scenes.iter().enumerate() {
            let tape = Tape::new();
            let pv = store.lift(&tape);
            let step =
                scene_step(&tape, &pv, cfg, variant, scene, epoch, &mut rng, None)?;
            if !step.values.l_overall.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    scene: scene_idx,
                    values: step.values,
                });
            }
            tape.backward(&step.loss)?;
            let grads = pv.gradients();
            adam.apply(&mut store, &grads, lr);

            sums.l_det += step.values.l_det;
            sums.l_res += step.values.l_res;
            sums.l_kl += step.values.l_kl;
            sums.l_dis += step.values.l_dis;
            sums.l_overall += step.values.l_overall;
            log.step_losses.push(step.values.l_overall);
            log.step_det_losses.push(step.values.l_det);

            if let Some(f) = step.entropy.full {
                entropy_full += f;
                entropy_block += step.entropy.noisy_to_learnable.unwrap_or(0.0);
                entropy_count += 1;
                if step.entropy.per_layer_full.len() == per_layer.len() {
                    for (acc, v) in per_layer.iter_mut().zip(&step.entropy.per_layer_full) {
                        *acc += v;
                    }
                    per_layer_count += 1;
                }
            }

            let sets: Vec<std::collections::BTreeSet<(usize, usize)>> = step
                .assignments
                .iter()
                .map(|a| a.pairs.iter().copied().collect())
                .collect();
            if let Some(prev) = &prev_assignments[scene_idx] {
                for (p, c) in prev.iter().zip(&sets) {
                    flips += p.symmetric_difference(c).count() / 2;
                }
            }
            prev_assignments[scene_idx] = Some(sets);

            log.step_assignments.push(StepAssignments {
                epoch,
                scene: scene_idx,
                per_group: step.assignments.iter().map(|a| a.pairs.clone()).collect(),
            });
        }

        let n = scenes.len() as f64;
        log.epochs.push(EpochMetrics {
            epoch,
            l_det: sums.l_det / n,
            l_res: sums.l_res / n,
            l_kl: sums.l_kl / n,
            l_dis: sums.l_dis / n,
            entropy_full: (entropy_count > 0).then(|| entropy_full / entropy_count as f64),
            entropy_noisy_to_learnable: (entropy_count > 0)
                .then(|| entropy_block / entropy_count as f64),
            per_layer_entropy: if per_layer_count > 0 {
                per_layer.iter().map(|v| v / per_layer_count as f64).collect()
            } else {
                Vec::new()
            },
            assignment_flips: flips,
            lr,
        });
    }

    Ok(TrainOutput { store, log })
}

// ── Inference ──────────────────────────────────────────────────────────

/// Inference pass: learnable queries only, no mask, no dropout. Detections
/// come from the first query group, scored by the max category probability.
pub fn predict_scene(
    store: &ParamStore,
    cfg: &ScenarioConfig,
    scene: &Scene,
) -> ModelResult<Vec<Detection>> {
    let dcfg = cfg.decoder();
    let tape = Tape::new();
    let pv = store.lift(&tape);
    let features = scene.synthetic_features(dcfg.feature_tokens, dcfg.hidden_dim);
    let fwd = decoder_forward(&pv, &dcfg, &tape, &features, None, None, None)?;
    let preds = predictions_from_heads(&fwd.last().learnable_heads, dcfg.orientation_bins);

    let mut detections = Vec::new();
    for pred in preds.iter().take(dcfg.n_queries) {
        let (cat_idx, score) = pred.class_probs[..crate::kitti::NUM_CATEGORIES]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &p)| (i, p))
            .expect("non-empty category probs");
        detections.push(Detection {
            category: crate::kitti::Category::from_index(cat_idx).expect("category index"),
            score,
            box3d: prediction_box3d(pred, scene, dcfg.orientation_bins),
        });
    }
    Ok(detections)
}

/// The training-path forward restricted to its learnable track (used by the
/// isolation checks).
pub fn training_forward(
    store: &ParamStore,
    cfg: &ScenarioConfig,
    scene: &Scene,
    variant: Variant,
    seed: u64,
) -> ModelResult<(SceneForward, Option<FrozenNoise>)> {
    let dcfg = cfg.decoder();
    let tape = Tape::new();
    let pv = store.lift(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = if variant.uses_denoising() {
        make_noisy_query_sets(
            scene,
            dcfg.groups,
            &cfg.noise(0),
            variant.variational(),
            &pv.embedder(),
            &tape,
            &mut rng,
            None,
        )?
    } else {
        None
    };
    let mask = match &sets {
        Some(_) => Some(build_mask(scene.k(), dcfg.noisy_groups, dcfg.n_queries)?),
        None => None,
    };
    let features = scene.synthetic_features(dcfg.feature_tokens, dcfg.hidden_dim);
    let fwd = decoder_forward(&pv, &dcfg, &tape, &features, sets.as_ref(), mask.as_ref(), None)?;
    let frozen = sets.map(|s| FrozenNoise { noisy: s.noisy.clone(), eps: s.eps.clone() });
    Ok((fwd, frozen))
}

// ── Whole-model gradient check ─────────────────────────────────────────

/// Finite-difference check of the full scene loss against the tape, over
/// every parameter. The aux (noise, assignment, distillation targets,
/// dropout) is frozen at the base point so both sides differentiate the same
/// function. Returns the max relative error.
pub fn full_model_gradcheck(
    cfg: &ScenarioConfig,
    scene: &Scene,
    variant: Variant,
    seed: u64,
    eps: f64,
) -> ModelResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = ParamStore::init(&cfg.decoder(), rng.gen());

    // base pass defines the frozen aux
    let aux = {
        let tape = Tape::new();
        let pv = store.lift(&tape);
        scene_step(&tape, &pv, cfg, variant, scene, cfg.trigger_epoch, &mut rng, None)?.aux
    };

    let inputs = store.tensors();
    let store_ref = &store;
    let cfg_ref = cfg;
    let scene_ref = scene;
    let aux_ref = &aux;
    let err = check_gradients(
        move |tape, vars| {
            let pv = ParamVars::from_vars(store_ref, vars);
            let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
            let step = scene_step(
                tape,
                &pv,
                cfg_ref,
                variant,
                scene_ref,
                aux_ref.epoch,
                &mut dummy_rng,
                Some(aux_ref),
            )
            .map_err(|e| crate::numeric::NumericError::Invalid {
                op: "full_model_gradcheck",
                msg: e.to_string(),
            })?;
            Ok(step.loss)
        },
        &inputs,
        eps,
    )?;
    Ok(err)
}
