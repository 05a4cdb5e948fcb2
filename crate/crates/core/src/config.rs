//! One validated record holding every hyperparameter: loss weights, noise
//! rates, scheduler, decoder dims, optimizer schedule and scene-generation
//! ranges. Serialized as a flat JSON document; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::denoising::NoiseConfig;
use crate::kitti::{Category, SceneGenConfig};
use crate::matching::{CostWeights, SchedulerConfig};

pub type ConfigResult<T> = Result<T, ConfigError>;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Decoder shape parameters consumed by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub groups: usize,
    pub n_queries: usize,
    pub noisy_groups: usize,
    pub feature_tokens: usize,
    pub orientation_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    // overall loss weights
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub beta: f64,
    // noise rates
    pub lambda_c: f64,
    pub lambda_d: f64,
    // 3D weight scheduler
    pub epsilon: f64,
    pub trigger_epoch: usize,
    // query layout
    pub n_queries: usize,
    pub groups: usize,
    pub noisy_groups: usize,
    // decoder
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub nheads: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub feature_tokens: usize,
    pub orientation_bins: usize,
    // optimizer
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_rate: f64,
    pub lr_decay_epochs: Vec<usize>,
    // matching-cost weights
    pub lambda_cls: f64,
    pub lambda_proj: f64,
    pub lambda_lrtb: f64,
    pub lambda_giou: f64,
    pub w_size3d: f64,
    pub w_orien: f64,
    pub w_depth: f64,
    // focal loss
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    // evaluation
    pub confidence_threshold: f64,
    pub iou_threshold: f64,
    // synthetic scene ranges
    pub depth_min: f64,
    pub depth_max: f64,
    pub lateral_min: f64,
    pub lateral_max: f64,
    pub height_min: f64,
    pub height_max: f64,
    pub length_min: f64,
    pub length_max: f64,
    pub width_min: f64,
    pub width_max: f64,
    pub tall_min: f64,
    pub tall_max: f64,
    pub categories: Vec<Category>,
    pub image_w: u32,
    pub image_h: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ScenarioConfig {
    /// Published training hyperparameters (the full-scale configuration).
    pub fn paper() -> Self {
        let scene = SceneGenConfig::default();
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
            beta: 4.0,
            lambda_c: 0.4,
            lambda_d: 0.2,
            epsilon: 1.0,
            trigger_epoch: 85,
            n_queries: 50,
            groups: 11,
            noisy_groups: 5,
            hidden_dim: 256,
            ffn_dim: 256,
            nheads: 8,
            decoder_layers: 3,
            dropout: 0.1,
            feature_tokens: 64,
            orientation_bins: 12,
            epochs: 250,
            lr: 2e-4,
            weight_decay: 1e-4,
            lr_decay_rate: 0.5,
            lr_decay_epochs: vec![85, 125, 165, 205],
            lambda_cls: 2.0,
            lambda_proj: 10.0,
            lambda_lrtb: 5.0,
            lambda_giou: 2.0,
            w_size3d: 1.0,
            w_orien: 1.0,
            w_depth: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            confidence_threshold: 0.2,
            iou_threshold: 0.7,
            depth_min: scene.depth_range.0,
            depth_max: scene.depth_range.1,
            lateral_min: scene.lateral_range.0,
            lateral_max: scene.lateral_range.1,
            height_min: scene.height_range.0,
            height_max: scene.height_range.1,
            length_min: scene.length_range.0,
            length_max: scene.length_range.1,
            width_min: scene.width_range.0,
            width_max: scene.width_range.1,
            tall_min: scene.tall_range.0,
            tall_max: scene.tall_range.1,
            categories: scene.categories,
            image_w: scene.image_size.0,
            image_h: scene.image_size.1,
            fx: scene.fx,
            fy: scene.fy,
            cx: scene.cx,
            cy: scene.cy,
        }
    }

    /// Desk-scale preset: the published schedule compressed to 100 epochs
    /// (trigger 34, decays at the same phase fractions) on a small decoder.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            trigger_epoch: 34,
            lr_decay_epochs: vec![34, 50, 66, 82],
            lr: 3e-3,
            hidden_dim: 32,
            ffn_dim: 32,
            nheads: 4,
            decoder_layers: 3,
            dropout: 0.0,
            n_queries: 8,
            groups: 2,
            noisy_groups: 2,
            feature_tokens: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> ConfigResult<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{} must be positive, got {}", name, v)))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{} must be >= 0, got {}", name, v)))
            }
        };
        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)?;
        non_negative("lambda3", self.lambda3)?;
        non_negative("beta", self.beta)?;
        non_negative("lambda_c", self.lambda_c)?;
        non_negative("epsilon", self.epsilon)?;
        if !(0.0..=1.0).contains(&self.lambda_d) {
            return Err(ConfigError::Invalid(format!("lambda_d {} outside [0,1]", self.lambda_d)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!("dropout {} outside [0,1)", self.dropout)));
        }
        for (name, v) in [
            ("n_queries", self.n_queries),
            ("groups", self.groups),
            ("noisy_groups", self.noisy_groups),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("nheads", self.nheads),
            ("decoder_layers", self.decoder_layers),
            ("feature_tokens", self.feature_tokens),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{} must be >= 1", name)));
            }
        }
        if self.orientation_bins < 2 {
            return Err(ConfigError::Invalid("orientation_bins must be >= 2".into()));
        }
        if self.hidden_dim % self.nheads != 0 {
            return Err(ConfigError::Invalid(format!(
                "hidden_dim {} not divisible by nheads {}",
                self.hidden_dim, self.nheads
            )));
        }
        if self.hidden_dim % 8 != 0 {
            return Err(ConfigError::Invalid(format!(
                "hidden_dim {} must be divisible by 8 (sinusoid split)",
                self.hidden_dim
            )));
        }
        positive("lr", self.lr)?;
        non_negative("weight_decay", self.weight_decay)?;
        if !(0.0 < self.lr_decay_rate && self.lr_decay_rate <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "lr_decay_rate {} outside (0,1]",
                self.lr_decay_rate
            )));
        }
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_proj", self.lambda_proj),
            ("lambda_lrtb", self.lambda_lrtb),
            ("lambda_giou", self.lambda_giou),
            ("w_size3d", self.w_size3d),
            ("w_orien", self.w_orien),
            ("w_depth", self.w_depth),
            ("focal_gamma", self.focal_gamma),
        ] {
            non_negative(name, v)?;
        }
        if !(0.0..1.0).contains(&self.focal_alpha) {
            return Err(ConfigError::Invalid(format!("focal_alpha {} outside [0,1)", self.focal_alpha)));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(ConfigError::Invalid("confidence_threshold outside [0,1]".into()));
        }
        if !(0.0 < self.iou_threshold && self.iou_threshold < 1.0) {
            return Err(ConfigError::Invalid("iou_threshold outside (0,1)".into()));
        }
        self.scene_gen()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn scene_gen(&self) -> SceneGenConfig {
        SceneGenConfig {
            depth_range: (self.depth_min, self.depth_max),
            lateral_range: (self.lateral_min, self.lateral_max),
            height_range: (self.height_min, self.height_max),
            length_range: (self.length_min, self.length_max),
            width_range: (self.width_min, self.width_max),
            tall_range: (self.tall_min, self.tall_max),
            categories: self.categories.clone(),
            image_size: (self.image_w, self.image_h),
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            orientation_bins: self.orientation_bins,
        }
    }

    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig { epsilon: self.epsilon, trigger_epoch: self.trigger_epoch }
    }

    pub fn cost_weights(&self) -> CostWeights {
        CostWeights {
            lambda_cls: self.lambda_cls,
            lambda_proj: self.lambda_proj,
            lambda_lrtb: self.lambda_lrtb,
            lambda_giou: self.lambda_giou,
            w_size3d: self.w_size3d,
            w_orien: self.w_orien,
            w_depth: self.w_depth,
        }
    }

    pub fn noise(&self, seed: u64) -> NoiseConfig {
        NoiseConfig {
            lambda_c: self.lambda_c,
            lambda_d: self.lambda_d,
            noisy_groups: self.noisy_groups,
            orientation_bins: self.orientation_bins,
            seed,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder_layers,
            hidden_dim: self.hidden_dim,
            ffn_dim: self.ffn_dim,
            heads: self.nheads,
            dropout: self.dropout,
            groups: self.groups,
            n_queries: self.n_queries,
            noisy_groups: self.noisy_groups,
            feature_tokens: self.feature_tokens,
            orientation_bins: self.orientation_bins,
        }
    }

    /// Parses and validates a flat JSON document; unknown keys are an error.
    pub fn from_json(text: &str) -> ConfigResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ScenarioConfig::paper().validate().unwrap();
        ScenarioConfig::desk().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ScenarioConfig::desk();
        let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ScenarioConfig::desk().to_json()).unwrap();
        v.as_object_mut().unwrap().insert("mystery_knob".into(), 3.0.into());
        assert!(ScenarioConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn invariant_violations_rejected() {
        let mut cfg = ScenarioConfig::desk();
        cfg.lambda_d = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::desk();
        cfg.hidden_dim = 30; // not divisible by nheads=4? it is; but not by 8
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::desk();
        cfg.epsilon = -0.1;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::desk();
        cfg.depth_min = -2.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn table_defaults_pin_published_values() {
        let p = ScenarioConfig::paper();
        assert_eq!((p.lambda1, p.lambda2, p.lambda3), (1.0, 1.0, 0.5));
        assert_eq!(p.beta, 4.0);
        assert_eq!((p.lambda_c, p.lambda_d), (0.4, 0.2));
        assert_eq!((p.epsilon, p.trigger_epoch), (1.0, 85));
        assert_eq!((p.n_queries, p.groups, p.noisy_groups), (50, 11, 5));
        assert_eq!((p.hidden_dim, p.ffn_dim, p.nheads, p.decoder_layers), (256, 256, 8, 3));
        assert_eq!(p.dropout, 0.1);
        assert_eq!(p.weight_decay, 1e-4);
        assert_eq!(p.lr_decay_rate, 0.5);
        assert_eq!(p.lr_decay_epochs, vec![85, 125, 165, 205]);
        assert_eq!((p.lambda_cls, p.lambda_proj, p.lambda_lrtb, p.lambda_giou), (2.0, 10.0, 5.0, 2.0));
    }
}
