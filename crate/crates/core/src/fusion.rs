//! Two-branch denoising with latent fusion.
//!
//! Both branches take a guided DDIM step each timestep. Once `t ≤ T − τ`
//! their outputs are blended as `α·z^V + (1−α)·z^I`, α is advanced (in
//! linear-to-one mode) by `(1 − α_τ)/(T − τ)`, and both branches continue
//! from the blended latent.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ddim::{ddim_sample_step, guided_eps, GuidanceConfig};
use crate::denoisers::{ConditionEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    /// α stays at α_τ for every fused step.
    Fixed,
    /// α grows by `(1 − α_τ)/(T − τ)` after each fused step, reaching 1.
    LinearToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Number of initial steps the branches run independently.
    pub tau: usize,
    pub alpha_tau: f64,
    pub mode: AlphaMode,
}

impl FusionConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.tau > steps {
            return Err(Error::Config(format!("tau = {} exceeds T = {steps}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha_tau) {
            return Err(Error::Config(format!("alpha_tau = {} outside [0, 1]", self.alpha_tau)));
        }
        Ok(())
    }

    /// Number of fused steps, `T − τ`.
    pub fn fused_steps(&self, steps: usize) -> usize {
        steps - self.tau.min(steps)
    }
}

/// `z* = α·z^V + (1−α)·z^I`, elementwise.
pub fn fuse_latents(z_video: &VideoLatent, z_image: &VideoLatent, alpha: f64) -> Result<VideoLatent> {
    z_video.ensure_same_shape(z_image)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidRange(format!("fusion ratio {alpha} outside [0, 1]")));
    }
    let out =
        ndarray::Zip::from(z_video.values()).and(z_image.values()).map_collect(|&v, &i| alpha * v + (1.0 - alpha) * i);
    Ok(VideoLatent::from_array(out))
}

/// `α_{t−1} = α_t + (1 − α_τ)/(T − τ)`.
pub fn next_alpha(alpha_t: f64, alpha_tau: f64, steps: usize, tau: usize) -> Result<f64> {
    if tau >= steps {
        return Err(Error::Config(format!("alpha increment undefined for tau = {tau} >= T = {steps}")));
    }
    Ok(alpha_t + (1.0 - alpha_tau) / (steps - tau) as f64)
}

/// One denoising branch: model, starting latent, condition and guidance.
pub struct Branch<'a> {
    pub model: &'a dyn Denoiser,
    pub start: VideoLatent,
    pub cond: ConditionEmbedding,
    pub guidance: GuidanceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub fused: bool,
    pub alpha_used: Option<f64>,
    /// ‖z^V_{t−1} − z^I_{t−1}‖ before fusion.
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionTrace {
    pub rows: Vec<TraceRow>,
    /// α after the last update (equals α_τ if nothing was fused).
    pub final_alpha: f64,
}

impl FusionTrace {
    pub fn fused_count(&self) -> usize {
        self.rows.iter().filter(|r| r.fused).count()
    }

    pub fn first_fused(&self) -> Option<&TraceRow> {
        self.rows.iter().find(|r| r.fused)
    }

    /// CSV with columns `t,fused,alpha_used,divergence`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "fused", "alpha_used", "divergence"])?;
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                r.fused.to_string(),
                r.alpha_used.map(|a| a.to_string()).unwrap_or_default(),
                r.divergence.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What one call to [`FusionRun::step`] did, with the branch outputs seen
/// before fusion.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub row: TraceRow,
    pub video_pre: VideoLatent,
    pub image_pre: VideoLatent,
}

/// Step-by-step driver for the fused loop; [`fldm_edit`] runs it to the end.
pub struct FusionRun<'a, 's> {
    video: Branch<'a>,
    image: Branch<'a>,
    schedule: &'s NoiseSchedule,
    fusion: FusionConfig,
    z_video: VideoLatent,
    z_image: VideoLatent,
    alpha: f64,
    t: usize,
    trace: FusionTrace,
}

impl<'a, 's> FusionRun<'a, 's> {
    pub fn new(
        video: Branch<'a>,
        image: Branch<'a>,
        schedule: &'s NoiseSchedule,
        fusion: FusionConfig,
    ) -> Result<Self> {
        let steps = schedule.steps();
        fusion.validate(steps)?;
        video.start.ensure_same_shape(&image.start)?;
        video.guidance.validate(steps)?;
        image.guidance.validate(steps)?;
        Ok(Self {
            z_video: video.start.clone(),
            z_image: image.start.clone(),
            alpha: fusion.alpha_tau,
            t: steps,
            trace: FusionTrace { rows: Vec::with_capacity(steps), final_alpha: fusion.alpha_tau },
            video,
            image,
            schedule,
            fusion,
        })
    }

    /// Current timestep; 0 once finished.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t == 0
    }

    pub fn video_latent(&self) -> &VideoLatent {
        &self.z_video
    }

    pub fn image_latent(&self) -> &VideoLatent {
        &self.z_image
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.t;
        if t == 0 {
            return Err(Error::InvalidRange("fusion loop already finished".into()));
        }
        let steps = self.schedule.steps();
        let branch_step = |b: &Branch<'_>, z: &VideoLatent| -> Result<VideoLatent> {
            let eps = guided_eps(b.model, z, t, &b.cond, &b.guidance)?;
            ddim_sample_step(z, &eps, t, self.schedule)
        };
        let (zi, zv) =
            rayon::join(|| branch_step(&self.image, &self.z_image), || branch_step(&self.video, &self.z_video));
        let (zi, zv) = (zi?, zv?);
        let divergence = zv.distance(&zi)?;
        let fused = t + self.fusion.tau <= steps;
        let mut row = TraceRow { t, fused, alpha_used: None, divergence };
        let record_pre = (zv.clone(), zi.clone());
        if fused {
            let z_star = fuse_latents(&zv, &zi, self.alpha)?;
            row.alpha_used = Some(self.alpha);
            if self.fusion.mode == AlphaMode::LinearToOne {
                self.alpha = next_alpha(self.alpha, self.fusion.alpha_tau, steps, self.fusion.tau)?;
            }
            self.z_image = z_star.clone();
            self.z_video = z_star;
        } else {
            self.z_image = zi;
            self.z_video = zv;
        }
        self.t -= 1;
        self.trace.rows.push(row);
        self.trace.final_alpha = self.alpha;
        Ok(StepRecord { row, video_pre: record_pre.0, image_pre: record_pre.1 })
    }

    /// Output latent: the fused latent if the last step fused, else the video branch.
    pub fn output(&self) -> &VideoLatent {
        &self.z_video
    }

    pub fn finish(mut self) -> Result<(VideoLatent, FusionTrace)> {
        while !self.is_done() {
            self.step()?;
        }
        Ok((self.z_video, self.trace))
    }
}

/// Runs the full fused denoising loop from `T` down to 0.
///
/// With `τ = T` nothing is fused and the result is the video branch's own output.
pub fn fldm_edit(
    video: Branch<'_>,
    image: Branch<'_>,
    schedule: &NoiseSchedule,
    fusion: FusionConfig,
) -> Result<(VideoLatent, FusionTrace)> {
    FusionRun::new(video, image, schedule, fusion)?.finish()
}
