//! Toy three-layer decoder: mask-separated self-attention, cross-attention
//! over synthetic feature tokens, FFN, and the shared detection heads.

use crate::attention::{
    masked_grouped_attention, multi_head_attention, AttentionMask, AttentionRecord,
    AttentionWeights,
};
use crate::config::DecoderConfig;
use crate::denoising::NoisyQuerySets;
use crate::matching::Prediction;
use crate::numeric::{NumericResult, Tape, Tensor, Var};

use super::params::{logit, ParamVars};
use super::ModelResult;

const LN_EPS: f64 = 1e-5;

/// Per-field head outputs for a block of query rows.
pub struct DecodedHeads {
    pub class_logits: Var,
    pub center: Var,
    pub lrtb: Var,
    pub dims: Var,
    pub depth: Var,
    pub bin_logits: Var,
    pub residual: Var,
}

/// Queries and heads after one decoder layer.
pub struct LayerOutput {
    /// (G*N, D) learnable-track queries.
    pub learnable: Var,
    /// (G*C*K, D) noisy-track queries, groups concatenated in order.
    pub noisy: Option<Var>,
    pub learnable_heads: DecodedHeads,
    pub noisy_heads: Option<DecodedHeads>,
    /// Per-group self-attention records (empty on the inference path).
    pub records: Vec<AttentionRecord>,
}

pub struct SceneForward {
    pub layers: Vec<LayerOutput>,
}

impl SceneForward {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder has at least one layer")
    }
}

fn attention_weights(pv: &ParamVars, layer: usize, block: &str, heads: usize) -> AttentionWeights {
    let p = |w: &str| pv.v(&format!("layer{}.{}.{}", layer, block, w));
    AttentionWeights {
        wq: p("wq"),
        bq: p("bq"),
        wk: p("wk"),
        bk: p("bk"),
        wv: p("wv"),
        bv: p("bv"),
        wo: p("wo"),
        bo: p("bo"),
        heads,
    }
}

/// Sequential consumer of a pre-drawn dropout plan.
struct DropoutCursor<'a> {
    rate: f64,
    plan: Option<&'a [Tensor]>,
    next: usize,
}

impl<'a> DropoutCursor<'a> {
    fn apply(&mut self, x: &Var) -> NumericResult<Var> {
        match self.plan {
            None => Ok(x.clone()),
            Some(masks) => {
                let mask = &masks[self.next];
                self.next += 1;
                x.dropout(mask, self.rate)
            }
        }
    }
}

/// Shapes of the dropout keep-masks a forward pass will consume, in draw
/// order: per layer [sa_noisy?, sa_learn, ca_noisy?, ca_learn, ffn_noisy?,
/// ffn_learn].
pub fn dropout_plan_shapes(cfg: &DecoderConfig, k: usize, has_noisy: bool) -> Vec<Vec<usize>> {
    let d = cfg.hidden_dim;
    let gn = cfg.groups * cfg.n_queries;
    let gck = cfg.groups * cfg.noisy_groups * k;
    let mut shapes = Vec::new();
    for _ in 0..cfg.layers {
        for _ in 0..3 {
            if has_noisy {
                shapes.push(vec![gck, d]);
            }
            shapes.push(vec![gn, d]);
        }
    }
    shapes
}

fn layer_norm(pv: &ParamVars, layer: usize, which: &str, x: &Var) -> NumericResult<Var> {
    x.layernorm(
        &pv.v(&format!("layer{}.{}.gamma", layer, which)),
        &pv.v(&format!("layer{}.{}.beta", layer, which)),
        LN_EPS,
    )
}

fn ffn(pv: &ParamVars, layer: usize, x: &Var) -> NumericResult<Var> {
    x.matmul(&pv.v(&format!("layer{}.ffn.w1", layer)))?
        .add_row(&pv.v(&format!("layer{}.ffn.b1", layer)))?
        .gelu()
        .matmul(&pv.v(&format!("layer{}.ffn.w2", layer)))?
        .add_row(&pv.v(&format!("layer{}.ffn.b2", layer)))
}

fn decode_heads(pv: &ParamVars, x: &Var, anchor_logits: &Var) -> NumericResult<DecodedHeads> {
    let head = |name: &str| -> NumericResult<Var> {
        x.matmul(&pv.v(&format!("head.{}.w", name)))?
            .add_row(&pv.v(&format!("head.{}.b", name)))
    };
    let center = head("center")?.add(&anchor_logits.slice_cols(0, 2)?)?.sigmoid();
    let lrtb = head("lrtb")?.add(&anchor_logits.slice_cols(2, 4)?)?.sigmoid();
    Ok(DecodedHeads {
        class_logits: head("class")?,
        center,
        lrtb,
        dims: head("dims")?.softplus(),
        depth: head("depth")?.softplus(),
        bin_logits: head("bin")?,
        residual: head("residual")?,
    })
}

/// Full decoder stack. `noisy = None` is the inference path (and the
/// no-denoising training path): only learnable queries, no mask.
///
/// Every computation outside the masked self-attention is row-local, so the
/// learnable track is bit-identical with and without noisy queries present.
pub fn decoder_forward(
    pv: &ParamVars,
    cfg: &DecoderConfig,
    tape: &Tape,
    features: &Tensor,
    noisy: Option<&NoisyQuerySets>,
    mask: Option<&AttentionMask>,
    dropout_plan: Option<&[Tensor]>,
) -> ModelResult<SceneForward> {
    let g = cfg.groups;
    let n = cfg.n_queries;
    let feat = tape.constant(features.clone()).add(&pv.v("features.bias"))?;

    let learn_anchor = pv.v("query.anchor_logits");
    let mut learnable = pv.v("query.content");

    let (mut noisy_track, noisy_anchor, k) = match noisy {
        Some(sets) => {
            let stacked = Var::concat_rows(&sets.queries)?;
            let mut anchor_data = Vec::with_capacity(stacked.shape()[0] * 6);
            for group in &sets.noisy {
                for o in group {
                    for &a in &o.anchor6d {
                        anchor_data.push(logit(a));
                    }
                }
            }
            let anchors = tape.constant(Tensor::new(vec![stacked.shape()[0], 6], anchor_data)?);
            (Some(stacked), Some(anchors), sets.k)
        }
        None => (None, None, 0),
    };

    let mut dropout = DropoutCursor {
        rate: cfg.dropout,
        plan: dropout_plan.filter(|_| cfg.dropout > 0.0),
        next: 0,
    };

    let mut layers = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        // ── mask-separated self-attention, per group ──
        let learn_groups = learnable.split_rows(&vec![n; g])?;
        let noisy_groups = match &noisy_track {
            Some(t) => t.split_rows(&vec![cfg.noisy_groups * k; g])?,
            None => Vec::new(),
        };
        let sa_w = attention_weights(pv, layer, "sa", cfg.heads);
        let sa = masked_grouped_attention(&learn_groups, &noisy_groups, &sa_w, mask)?;

        let sa_learn = Var::concat_rows(&sa.learnable)?;
        let mut x_learn = layer_norm(pv, layer, "ln1", &learnable.add(&dropout.apply(&sa_learn)?)?)?;
        let mut x_noisy = match (&noisy_track, sa.noisy.is_empty()) {
            (Some(prev), false) => {
                let sa_noisy = Var::concat_rows(&sa.noisy)?;
                Some(layer_norm(pv, layer, "ln1", &prev.add(&dropout.apply(&sa_noisy)?)?)?)
            }
            _ => None,
        };

        // ── cross-attention over the feature tokens (row-local) ──
        let ca_w = attention_weights(pv, layer, "ca", cfg.heads);
        if let Some(xn) = &x_noisy {
            let (ca_out, _) = multi_head_attention(xn, &feat, &ca_w, None)?;
            x_noisy = Some(layer_norm(pv, layer, "ln2", &xn.add(&dropout.apply(&ca_out)?)?)?);
        } else if noisy_track.is_some() {
            unreachable!("noisy track lost between sublayers");
        }
        let (ca_learn, _) = multi_head_attention(&x_learn, &feat, &ca_w, None)?;
        x_learn = layer_norm(pv, layer, "ln2", &x_learn.add(&dropout.apply(&ca_learn)?)?)?;

        // ── feed-forward ──
        if let Some(xn) = &x_noisy {
            let f = ffn(pv, layer, xn)?;
            x_noisy = Some(layer_norm(pv, layer, "ln3", &xn.add(&dropout.apply(&f)?)?)?);
        }
        let f = ffn(pv, layer, &x_learn)?;
        x_learn = layer_norm(pv, layer, "ln3", &x_learn.add(&dropout.apply(&f)?)?)?;

        let learnable_heads = decode_heads(pv, &x_learn, &learn_anchor)?;
        let noisy_heads = match (&x_noisy, &noisy_anchor) {
            (Some(xn), Some(anchor)) => Some(decode_heads(pv, xn, anchor)?),
            _ => None,
        };

        layers.push(LayerOutput {
            learnable: x_learn.clone(),
            noisy: x_noisy.clone(),
            learnable_heads,
            noisy_heads,
            records: sa.records,
        });

        learnable = x_learn;
        noisy_track = x_noisy;
    }

    Ok(SceneForward { layers })
}

/// Value-level softmax of one row.
fn softmax_values(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Extracts plain `Prediction` records (values, detached) from decoded heads.
pub fn predictions_from_heads(heads: &DecodedHeads, orientation_bins: usize) -> Vec<Prediction> {
    let class = heads.class_logits.value();
    let center = heads.center.value();
    let lrtb = heads.lrtb.value();
    let dims = heads.dims.value();
    let depth = heads.depth.value();
    let bins = heads.bin_logits.value();
    let residual = heads.residual.value();
    let rows = class.shape()[0];
    let n_class = class.shape()[1];
    (0..rows)
        .map(|r| {
            let class_row: Vec<f64> = (0..n_class).map(|j| class.get2(r, j)).collect();
            let bin_row: Vec<f64> = (0..orientation_bins).map(|j| bins.get2(r, j)).collect();
            Prediction {
                class_probs: softmax_values(&class_row),
                center_proj: (center.get2(r, 0), center.get2(r, 1)),
                box2d: crate::geometry::Box2D {
                    l: lrtb.get2(r, 0),
                    r: lrtb.get2(r, 1),
                    t: lrtb.get2(r, 2),
                    b: lrtb.get2(r, 3),
                },
                dims: [dims.get2(r, 0), dims.get2(r, 1), dims.get2(r, 2)],
                depth: depth.get2(r, 0),
                orientation_bin_probs: softmax_values(&bin_row),
                orientation_residual: residual.get2(r, 0),
            }
        })
        .collect()
}
