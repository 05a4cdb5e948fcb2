//! Flat named parameter store. Every learnable tensor lives here so the
//! optimizer, the serializer and the finite-difference checker can walk the
//! same ordered list.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DecoderConfig;
use crate::denoising::EmbedderWeights;
use crate::kitti::NUM_CATEGORIES;
use crate::numeric::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Inverse sigmoid, clamped away from the asymptotes.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

impl ParamStore {
    /// Initializes every parameter of the toy detector for the given shape
    /// configuration; deterministic per seed.
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden_dim;
        let mut entries: Vec<(String, Tensor)> = Vec::new();

        let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
                .expect("xavier shape")
        };
        let uniform = |rng: &mut ChaCha8Rng, shape: Vec<usize>, a: f64| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..a)).collect()).expect("uniform shape")
        };

        let gn = cfg.groups * cfg.n_queries;
        entries.push(("query.content".into(), uniform(&mut rng, vec![gn, d], 0.5)));
        // anchors in logit space: centers spread over the frame, small boxes
        let mut anchors = Vec::with_capacity(gn * 6);
        for _ in 0..gn {
            anchors.push(logit(rng.gen_range(0.1..0.9)));
            anchors.push(logit(rng.gen_range(0.1..0.9)));
            for _ in 0..4 {
                anchors.push(logit(rng.gen_range(0.05..0.25)));
            }
        }
        entries.push((
            "query.anchor_logits".into(),
            Tensor::new(vec![gn, 6], anchors).expect("anchor shape"),
        ));
        entries.push((
            "features.bias".into(),
            uniform(&mut rng, vec![cfg.feature_tokens, d], 0.1),
        ));

        for layer in 0..cfg.layers {
            for block in ["sa", "ca"] {
                for w in ["wq", "wk", "wv", "wo"] {
                    entries.push((format!("layer{}.{}.{}", layer, block, w), xavier(&mut rng, d, d)));
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    entries.push((format!("layer{}.{}.{}", layer, block, b), Tensor::zeros(vec![d])));
                }
            }
            for ln in ["ln1", "ln2", "ln3"] {
                entries.push((format!("layer{}.{}.gamma", layer, ln), Tensor::full(vec![d], 1.0)));
                entries.push((format!("layer{}.{}.beta", layer, ln), Tensor::zeros(vec![d])));
            }
            entries.push((format!("layer{}.ffn.w1", layer), xavier(&mut rng, d, cfg.ffn_dim)));
            entries.push((format!("layer{}.ffn.b1", layer), Tensor::zeros(vec![cfg.ffn_dim])));
            entries.push((format!("layer{}.ffn.w2", layer), xavier(&mut rng, cfg.ffn_dim, d)));
            entries.push((format!("layer{}.ffn.b2", layer), Tensor::zeros(vec![d])));
        }

        // shared heads; depth/dims biases start in a plausible metric range
        let heads: [(&str, usize, f64); 7] = [
            ("class", NUM_CATEGORIES + 1, 0.0),
            ("center", 2, 0.0),
            ("lrtb", 4, 0.0),
            ("dims", 3, 1.2),
            ("depth", 1, 15.0),
            ("bin", cfg.orientation_bins, 0.0),
            ("residual", 1, 0.0),
        ];
        for (name, width, bias_init) in heads {
            entries.push((format!("head.{}.w", name), xavier(&mut rng, d, width)));
            entries.push((format!("head.{}.b", name), Tensor::full(vec![width], bias_init)));
        }

        entries.push(("embed.cat_table".into(), uniform(&mut rng, vec![NUM_CATEGORIES, d], 0.5)));
        entries.push((
            "embed.bin_table".into(),
            uniform(&mut rng, vec![cfg.orientation_bins, d], 0.5),
        ));
        entries.push(("embed.mlp.w1".into(), xavier(&mut rng, 3 * d, d)));
        entries.push(("embed.mlp.b1".into(), Tensor::zeros(vec![d])));
        entries.push(("embed.mlp.w2".into(), xavier(&mut rng, d, d)));
        entries.push(("embed.mlp.b2".into(), Tensor::zeros(vec![d])));
        entries.push(("embed.mlp.w3".into(), xavier(&mut rng, d, d)));
        entries.push(("embed.mlp.b3".into(), Tensor::zeros(vec![d])));
        entries.push(("embed.mu.w".into(), xavier(&mut rng, d, d)));
        entries.push(("embed.mu.b".into(), Tensor::zeros(vec![d])));
        entries.push(("embed.lv.w".into(), xavier(&mut rng, d, d)));
        entries.push(("embed.lv.b".into(), Tensor::zeros(vec![d])));

        entries.push(("distill.w1".into(), xavier(&mut rng, d, d)));
        entries.push(("distill.b1".into(), Tensor::zeros(vec![d])));
        entries.push(("distill.w2".into(), xavier(&mut rng, d, d)));
        entries.push(("distill.b2".into(), Tensor::zeros(vec![d])));

        Self { entries }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
            .1
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Lifts every parameter onto a tape as a tracked leaf.
    pub fn lift(&self, tape: &Tape) -> ParamVars {
        ParamVars {
            order: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            map: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.var(t.clone())))
                .collect(),
        }
    }
}

/// Tape-bound view of a `ParamStore`.
pub struct ParamVars {
    order: Vec<String>,
    map: HashMap<String, Var>,
}

impl ParamVars {
    /// Rebuild from externally created leaf vars (finite-difference path);
    /// `vars` must follow the store's entry order.
    pub fn from_vars(store: &ParamStore, vars: &[Var]) -> Self {
        assert_eq!(store.len(), vars.len(), "var count must match the store");
        ParamVars {
            order: store.entries.iter().map(|(n, _)| n.clone()).collect(),
            map: store
                .entries
                .iter()
                .zip(vars)
                .map(|((n, _), v)| (n.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn v(&self, name: &str) -> Var {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
            .clone()
    }

    /// Gradients in store order (zero-filled where backward never reached).
    pub fn gradients(&self) -> Vec<Tensor> {
        self.order
            .iter()
            .map(|n| {
                let var = &self.map[n];
                var.grad()
                    .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
            })
            .collect()
    }

    /// Embedder view used by the denoising module.
    pub fn embedder(&self) -> EmbedderWeights {
        EmbedderWeights {
            cat_table: self.v("embed.cat_table"),
            bin_table: self.v("embed.bin_table"),
            w1: self.v("embed.mlp.w1"),
            b1: self.v("embed.mlp.b1"),
            w2: self.v("embed.mlp.w2"),
            b2: self.v("embed.mlp.b2"),
            w3: self.v("embed.mlp.w3"),
            b3: self.v("embed.mlp.b3"),
            mu_w: self.v("embed.mu.w"),
            mu_b: self.v("embed.mu.b"),
            lv_w: self.v("embed.lv.w"),
            lv_b: self.v("embed.lv.b"),
        }
    }
}
