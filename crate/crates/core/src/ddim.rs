//! Deterministic DDIM sampling and inversion, with classifier-free guidance.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoisers::{ConditionEmbedding, Denoiser, Role};
use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::schedule::NoiseSchedule;

/// One DDIM step from noise level `ab_t` to `ab_prev`:
/// `√ᾱ_prev · (z − √(1−ᾱ_t) ε̂)/√ᾱ_t + √(1−ᾱ_prev) ε̂`.
///
/// Inversion is the same map with the two levels swapped.
pub fn ddim_update(z: &Array2<f64>, eps: &Array2<f64>, ab_t: f64, ab_prev: f64) -> Array2<f64> {
    let (sa_t, sb_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let (sa_p, sb_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    ndarray::Zip::from(z).and(eps).map_collect(|&z, &e| sa_p * ((z - sb_t * e) / sa_t) + sb_p * e)
}

fn step_levels(t: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    schedule.check_step(t)?;
    Ok((schedule.alpha_bar(t)?, schedule.alpha_bar(t - 1)?))
}

/// `z_t → z_{t−1}`.
pub fn ddim_sample_step(
    z_t: &VideoLatent,
    eps_hat: &VideoLatent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<VideoLatent> {
    z_t.ensure_same_shape(eps_hat)?;
    let (ab_t, ab_prev) = step_levels(t, schedule)?;
    Ok(VideoLatent::from_array(ddim_update(z_t.values(), eps_hat.values(), ab_t, ab_prev)))
}

/// `z_{t−1} → z_t`; the algebraic inverse of [`ddim_sample_step`] for the same ε̂.
pub fn ddim_invert_step(
    z_prev: &VideoLatent,
    eps_hat: &VideoLatent,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<VideoLatent> {
    z_prev.ensure_same_shape(eps_hat)?;
    let (ab_t, ab_prev) = step_levels(t, schedule)?;
    Ok(VideoLatent::from_array(ddim_update(z_prev.values(), eps_hat.values(), ab_prev, ab_t)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub text_scale: f64,
    /// Scale of the second (image) condition channel; enables dual guidance.
    pub image_scale: Option<f64>,
    #[serde(skip)]
    pub image_condition: Option<ConditionEmbedding>,
    /// Replaces the model's null embedding at every step.
    #[serde(skip)]
    pub null: Option<ConditionEmbedding>,
    /// Per-step null embeddings, index `t − 1`; takes precedence over `null`.
    #[serde(skip)]
    pub null_per_step: Option<Vec<ConditionEmbedding>>,
}

impl GuidanceConfig {
    pub fn text(scale: f64) -> Self {
        Self { text_scale: scale, image_scale: None, image_condition: None, null: None, null_per_step: None }
    }

    /// Conditional prediction only (scale 1).
    pub fn unguided() -> Self {
        Self::text(1.0)
    }

    pub fn dual(text_scale: f64, image_scale: f64, image_condition: ConditionEmbedding) -> Self {
        Self { image_scale: Some(image_scale), image_condition: Some(image_condition), ..Self::text(text_scale) }
    }

    pub fn with_null_per_step(mut self, nulls: Vec<ConditionEmbedding>) -> Self {
        self.null_per_step = Some(nulls);
        self
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let scales = std::iter::once(self.text_scale).chain(self.image_scale);
        for s in scales {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("guidance scale {s} must be finite and >= 0")));
            }
        }
        if self.image_scale.is_some() && self.image_condition.is_none() {
            return Err(Error::Config("dual guidance needs an image condition".into()));
        }
        if let Some(n) = &self.null_per_step {
            if n.len() < steps {
                return Err(Error::MissingOverride(n.len() + 1));
            }
        }
        Ok(())
    }

    pub fn null_for(&self, t: usize, model: &(impl Denoiser + ?Sized)) -> Result<ConditionEmbedding> {
        if let Some(per) = &self.null_per_step {
            return per.get(t.wrapping_sub(1)).cloned().ok_or(Error::MissingOverride(t));
        }
        Ok(self.null.clone().unwrap_or_else(|| model.null_embedding()))
    }
}

/// Runs `model` on `z`, one frame at a time for image-role models.
pub fn predict(
    model: &(impl Denoiser + ?Sized),
    z: &VideoLatent,
    t: usize,
    cond: &ConditionEmbedding,
) -> Result<VideoLatent> {
    match model.role() {
        Role::Video => model.predict_eps(z, t, cond),
        Role::Image => {
            let parts =
                (0..z.frames()).map(|k| model.predict_eps(&z.frame_latent(k), t, cond)).collect::<Result<Vec<_>>>()?;
            VideoLatent::concat(&parts)
        }
    }
}

fn predict_dual(
    model: &(impl Denoiser + ?Sized),
    z: &VideoLatent,
    t: usize,
    text: &ConditionEmbedding,
    image: &ConditionEmbedding,
) -> Result<VideoLatent> {
    match model.role() {
        Role::Video => model.predict_eps_dual(z, t, text, image),
        Role::Image => {
            let parts = (0..z.frames())
                .map(|k| model.predict_eps_dual(&z.frame_latent(k), t, text, image))
                .collect::<Result<Vec<_>>>()?;
            VideoLatent::concat(&parts)
        }
    }
}

/// Pulls `upstream` = ∂L/∂ε̂ back to the condition vector, frame by frame
/// for image-role models (matching [`predict`]).
pub fn condition_vjp(
    model: &(impl Denoiser + ?Sized),
    z: &VideoLatent,
    t: usize,
    cond: &ConditionEmbedding,
    upstream: &VideoLatent,
) -> Result<Vec<f64>> {
    z.ensure_same_shape(upstream)?;
    let grad = match model.role() {
        Role::Video => model.vjp(z, t, cond, upstream)?.condition,
        Role::Image => {
            let mut acc = vec![0.0; cond.dim()];
            for k in 0..z.frames() {
                let g = model.vjp(&z.frame_latent(k), t, cond, &upstream.frame_latent(k))?;
                for (a, v) in acc.iter_mut().zip(g.condition) {
                    *a += v;
                }
            }
            acc
        }
    };
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("condition coordinate {i} at t = {t}")));
    }
    Ok(grad)
}

/// `ε_∅ + s·(ε_c − ε_∅)`, or in dual mode
/// `ε_{∅,∅} + s_img·(ε_{∅,img} − ε_{∅,∅}) + s·(ε_{c,img} − ε_{∅,img})`.
pub fn guided_eps(
    model: &(impl Denoiser + ?Sized),
    z: &VideoLatent,
    t: usize,
    cond: &ConditionEmbedding,
    guidance: &GuidanceConfig,
) -> Result<VideoLatent> {
    let null = guidance.null_for(t, model)?;
    if let Some(s_img) = guidance.image_scale {
        let img = guidance
            .image_condition
            .as_ref()
            .ok_or_else(|| Error::Config("dual guidance needs an image condition".into()))?;
        let null_img = model.null_embedding();
        let e_nn = predict_dual(model, z, t, &null, &null_img)?;
        let e_ni = predict_dual(model, z, t, &null, img)?;
        let e_ci = predict_dual(model, z, t, cond, img)?;
        let s = guidance.text_scale;
        let out = e_nn.values() + &((e_ni.values() - e_nn.values()) * s_img) + &((e_ci.values() - e_ni.values()) * s);
        return Ok(VideoLatent::from_array(out));
    }
    let s = guidance.text_scale;
    if s == 1.0 {
        return predict(model, z, t, cond);
    }
    let e_null = predict(model, z, t, &null)?;
    if s == 0.0 {
        return Ok(e_null);
    }
    let e_cond = predict(model, z, t, cond)?;
    Ok(VideoLatent::from_array(e_null.values() + &((e_cond.values() - e_null.values()) * s)))
}

/// Latents along one sampling or inversion pass, in the order produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    pub latents: Vec<VideoLatent>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Latent recorded at diffusion level `t`.
    pub fn at(&self, t: usize) -> Option<&VideoLatent> {
        self.timesteps.iter().position(|&s| s == t).map(|i| &self.latents[i])
    }

    /// CSV with columns `timestep,frame,dim,value`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["timestep", "frame", "dim", "value"])?;
        for (t, z) in self.timesteps.iter().zip(&self.latents) {
            for ((k, i), v) in z.values().indexed_iter() {
                w.write_record([t.to_string(), k.to_string(), i.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Denoises `z_T` down to `z_0`. The trajectory starts with `z_T`.
pub fn ddim_sample_loop(
    model: &(impl Denoiser + ?Sized),
    z_t: &VideoLatent,
    cond: &ConditionEmbedding,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<(VideoLatent, Trajectory)> {
    let steps = schedule.steps();
    guidance.validate(steps)?;
    let mut z = z_t.clone();
    let mut traj = Trajectory { timesteps: vec![steps], latents: vec![z.clone()] };
    for t in (1..=steps).rev() {
        let eps = guided_eps(model, &z, t, cond, guidance)?;
        z = ddim_sample_step(&z, &eps, t, schedule)?;
        traj.timesteps.push(t - 1);
        traj.latents.push(z.clone());
    }
    Ok((z, traj))
}

/// Maps a clean latent to `z_T`, using ε̂ evaluated at the latent of the
/// previous level. The returned pivot trajectory starts with `z_0`.
pub fn ddim_invert_loop(
    model: &(impl Denoiser + ?Sized),
    z_0: &VideoLatent,
    cond: &ConditionEmbedding,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<(VideoLatent, Trajectory)> {
    let steps = schedule.steps();
    guidance.validate(steps)?;
    let mut z = z_0.clone();
    let mut traj = Trajectory { timesteps: vec![0], latents: vec![z.clone()] };
    for t in 1..=steps {
        let eps = guided_eps(model, &z, t, cond, guidance)?;
        z = ddim_invert_step(&z, &eps, t, schedule)?;
        traj.timesteps.push(t);
        traj.latents.push(z.clone());
    }
    Ok((z, traj))
}
