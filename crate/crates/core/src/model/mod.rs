//! Toy decoder with detection heads, every loss term, and the training loop.

mod decoder;
mod loss;
mod params;
mod train;

#[cfg(test)]
mod tests;

pub use decoder::{
    decoder_forward, dropout_plan_shapes, predictions_from_heads, DecodedHeads, LayerOutput,
    SceneForward,
};
pub use loss::{
    detection_loss, distillation_loss, kl_term, matched_rows, overall_loss, reconstruction_loss,
    LossValues, LossWeights,
};
pub use params::{logit, ParamStore, ParamVars};
pub use train::{
    full_model_gradcheck, predict_scene, prediction_box3d, scene_step, train, training_forward,
    Adam, EpochMetrics, ForwardAux, StepAssignments, StepOutput, TrainLog, TrainOutput, Variant,
};

use crate::numeric::NumericError;

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Matching(#[from] crate::matching::MatchingError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("model precondition: {0}")]
    Precondition(String),
    #[error("training diverged at epoch {epoch}, scene {scene}: {values:?}")]
    Diverged { epoch: usize, scene: usize, values: LossValues },
}
