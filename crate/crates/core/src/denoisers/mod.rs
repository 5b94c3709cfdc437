//! ε-predictors. Image-role models see one frame at a time; video-role
//! models see the whole clip and may couple frames.

mod analytic;
mod trained;

pub use analytic::{AnalyticGaussianDenoiser, GaussianComponent};
pub use trained::{
    evaluate_eps_mse, train_denoiser, LabeledVideo, TrainConfig, TrainReport, TrainedDenoiser, WeightsHeader,
    TIME_FEATURES,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::VideoLatent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Per-frame: row j of the prediction depends only on row j of the input.
    Image,
    /// Joint over frames.
    Video,
}

/// A prompt embedding `P`, or the null embedding `∅` when `is_null` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub vector: Vec<f64>,
    pub is_null: bool,
}

impl ConditionEmbedding {
    pub fn new(vector: Vec<f64>) -> Self {
        Self { vector, is_null: false }
    }

    pub fn null(vector: Vec<f64>) -> Self {
        Self { vector, is_null: true }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Gradients of a scalar loss through one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct InputGradients {
    pub latent: VideoLatent,
    pub condition: Vec<f64>,
}

pub trait Denoiser: Send + Sync {
    fn role(&self) -> Role;

    /// Predicted noise for `z` at step `t` (1..=T), same shape as `z`.
    fn predict_eps(&self, z: &VideoLatent, t: usize, cond: &ConditionEmbedding) -> Result<VideoLatent>;

    fn null_embedding(&self) -> ConditionEmbedding;

    fn class_embedding(&self, label: &str) -> Result<ConditionEmbedding>;

    /// Prediction under a text condition plus a second (image) condition channel.
    fn predict_eps_dual(
        &self,
        _z: &VideoLatent,
        _t: usize,
        _text: &ConditionEmbedding,
        _image: &ConditionEmbedding,
    ) -> Result<VideoLatent> {
        Err(Error::Unsupported("this denoiser has no image-condition channel".into()))
    }

    /// Vector-Jacobian product: pulls `upstream` = ∂L/∂ε̂ back to the latent
    /// and condition inputs.
    fn vjp(
        &self,
        _z: &VideoLatent,
        _t: usize,
        _cond: &ConditionEmbedding,
        _upstream: &VideoLatent,
    ) -> Result<InputGradients> {
        Err(Error::Unsupported("this denoiser has no differentiable condition input".into()))
    }
}

/// Gradient of `loss(ε̂(z, t, cond))` with respect to the condition vector.
/// `loss` returns the scalar value and ∂L/∂ε̂.
pub fn grad_wrt_condition<D, L>(
    model: &D,
    loss: L,
    z: &VideoLatent,
    t: usize,
    cond: &ConditionEmbedding,
) -> Result<(f64, Vec<f64>)>
where
    D: Denoiser + ?Sized,
    L: Fn(&VideoLatent) -> (f64, VideoLatent),
{
    let eps = model.predict_eps(z, t, cond)?;
    let (value, upstream) = loss(&eps);
    upstream.ensure_same_shape(&eps)?;
    let grads = model.vjp(z, t, cond, &upstream)?;
    if let Some(i) = grads.condition.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("condition coordinate {i} at t = {t}")));
    }
    Ok((value, grads.condition))
}
