use std::path::Path;

use crate::ddim::{ddim_invert_loop, ddim_sample_loop, GuidanceConfig};
use crate::denoisers::{
    train_denoiser, AnalyticGaussianDenoiser, ConditionEmbedding, Denoiser, LabeledVideo, Role, TrainReport,
    TrainedDenoiser,
};
use crate::error::{Error, Result};
use crate::fusion::{fldm_edit, Branch, FusionConfig, FusionTrace};
use crate::latent::VideoLatent;
use crate::metrics::{frame_consistency, textual_alignment, MetricsReport};
use crate::null_text::{null_text_invert, NullTextResult};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::world::{FrozenEmbedder, LatentCodec, SyntheticVideoPrior};

use super::config::{DenoiserChoice, DenoiserKind, ExperimentConfig};

/// The built toy universe shared by every run of a config.
#[derive(Debug, Clone)]
pub struct World {
    pub prior: SyntheticVideoPrior,
    pub codec: LatentCodec,
    pub embedder: FrozenEmbedder,
    pub schedule: NoiseSchedule,
}

impl World {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let w = &cfg.world;
        w.prior.validate()?;
        let codec = match w.codec_seed {
            Some(seed) => LatentCodec::random(w.prior.dims, seed),
            None => LatentCodec::identity(w.prior.dims),
        };
        Ok(Self {
            embedder: FrozenEmbedder::new(&w.prior, w.embed_dim, w.embedder_seed)?,
            prior: w.prior.clone(),
            codec,
            schedule: cfg.schedule.build()?,
        })
    }

    /// Encoded training clips, `per_class` for each class, deterministic in `seed`.
    pub fn training_set(&self, per_class: usize, seed: u64) -> Result<Vec<LabeledVideo>> {
        let mut out = Vec::with_capacity(per_class * self.prior.classes.len());
        let mut idx = 0u64;
        // interleave classes so any prefix (the held-out split) is balanced
        for _ in 0..per_class {
            for label in self.prior.labels() {
                let v = self.prior.sample_video(label, rng::derive_seed(seed, idx))?;
                out.push(LabeledVideo { latent: self.codec.encode(&v)?, label: label.to_string() });
                idx += 1;
            }
        }
        Ok(out)
    }

    pub fn metrics(&self, decoded: &VideoLatent, target: &str, seed: u64, fingerprint: &str) -> Result<MetricsReport> {
        let feats = self.embedder.embed_frames(decoded)?;
        let text = self.embedder.embed_text(target)?;
        Ok(MetricsReport {
            frame_consistency: frame_consistency(&feats)?,
            textual_alignment: textual_alignment(&feats, &text)?,
            n_frames: feats.len(),
            seed,
            config_fingerprint: fingerprint.to_string(),
        })
    }
}

pub struct Models {
    pub video: Box<dyn Denoiser>,
    pub image: Box<dyn Denoiser>,
    /// Training reports for models fitted while building (role order: image, video).
    pub reports: Vec<(Role, TrainReport)>,
}

impl Models {
    pub fn build(cfg: &ExperimentConfig, world: &World) -> Result<Self> {
        let mut reports = Vec::new();
        let mut data = None;
        let mut make = |role: Role, choice: &DenoiserChoice| -> Result<Box<dyn Denoiser>> {
            Ok(match (choice.kind, &choice.weights) {
                (DenoiserKind::Analytic, _) => Box::new(AnalyticGaussianDenoiser::with_text_fidelity(
                    &world.prior,
                    &world.codec,
                    world.schedule.clone(),
                    role,
                    choice.text_fidelity,
                )?),
                (DenoiserKind::Trained, Some(stem)) => {
                    let m = TrainedDenoiser::load(stem, &world.schedule)?;
                    if m.role() != role {
                        return Err(Error::Config(format!(
                            "weights at {} are for the {:?} role",
                            stem.display(),
                            m.role()
                        )));
                    }
                    Box::new(m)
                }
                (DenoiserKind::Trained, None) => {
                    if data.is_none() {
                        data = Some(world.training_set(cfg.train_clips_per_class, cfg.training.seed)?);
                    }
                    let (m, rep) = train_denoiser(role, data.as_ref().unwrap(), &world.schedule, &cfg.training)?;
                    reports.push((role, rep));
                    Box::new(m)
                }
            })
        };
        let image = make(Role::Image, &cfg.image_denoiser)?;
        let video = make(Role::Video, &cfg.video_denoiser)?;
        Ok(Self { video, image, reports })
    }
}

/// One branch after inversion: its noisy start and the guidance to edit with.
#[derive(Debug, Clone)]
pub struct InvertedBranch {
    pub z_t: VideoLatent,
    pub guidance: GuidanceConfig,
    pub target: ConditionEmbedding,
    pub null_text: Option<NullTextResult>,
}

/// Everything about a seed that does not depend on the fusion settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub source_video: VideoLatent,
    pub z_0: VideoLatent,
    pub video: InvertedBranch,
    pub image: InvertedBranch,
}

fn invert_branch(
    model: &dyn Denoiser,
    kind: DenoiserKind,
    z_0: &VideoLatent,
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    image_scale: Option<f64>,
) -> Result<InvertedBranch> {
    let source = model.class_embedding(&cfg.source_class)?;
    let target = model.class_embedding(&cfg.target_class)?;
    let scale = cfg.guidance.text_scale;
    let (z_t, mut guidance, null_text) = match kind {
        // analytic nulls have no parameters to optimize
        DenoiserKind::Analytic => {
            let (z_t, _) = ddim_invert_loop(model, z_0, &source, &GuidanceConfig::unguided(), schedule)?;
            (z_t, GuidanceConfig::text(scale), None)
        }
        DenoiserKind::Trained => {
            let res = null_text_invert(model, z_0, &source, &GuidanceConfig::text(scale), schedule, &cfg.null_text)?;
            (res.z_t.clone(), res.guidance(scale), Some(res))
        }
    };
    if let Some(s) = image_scale {
        guidance.image_scale = Some(s);
        guidance.image_condition = Some(source);
    }
    Ok(InvertedBranch { z_t, guidance, target, null_text })
}

pub fn prepare(cfg: &ExperimentConfig, world: &World, models: &Models, seed: u64) -> Result<Prepared> {
    let source_video = world.prior.sample_video(&cfg.source_class, rng::derive_seed(seed, 0))?;
    let z_0 = world.codec.encode(&source_video)?;
    let video = invert_branch(models.video.as_ref(), cfg.video_denoiser.kind, &z_0, cfg, &world.schedule, None)?;
    let mut image = invert_branch(
        models.image.as_ref(),
        cfg.image_denoiser.kind,
        &z_0,
        cfg,
        &world.schedule,
        cfg.guidance.image_scale,
    )?;
    if cfg.shared_inversion {
        image.z_t = video.z_t.clone();
    }
    Ok(Prepared { seed, source_video, z_0, video, image })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    VideoOnly,
    ImageOnly,
    Fused(FusionConfig),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::VideoOnly => "video-only",
            Method::ImageOnly => "image-only",
            Method::Fused(_) => "fused",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub latent: VideoLatent,
    pub decoded: VideoLatent,
    pub trace: Option<FusionTrace>,
    pub metrics: MetricsReport,
}

pub fn run_method(
    cfg: &ExperimentConfig,
    world: &World,
    models: &Models,
    prep: &Prepared,
    method: Method,
    fingerprint: &str,
) -> Result<EditOutcome> {
    let (latent, trace) = match method {
        Method::VideoOnly => {
            let b = &prep.video;
            let (z, _) = ddim_sample_loop(models.video.as_ref(), &b.z_t, &b.target, &b.guidance, &world.schedule)?;
            (z, None)
        }
        Method::ImageOnly => {
            let b = &prep.image;
            let (z, _) = ddim_sample_loop(models.image.as_ref(), &b.z_t, &b.target, &b.guidance, &world.schedule)?;
            (z, None)
        }
        Method::Fused(fusion) => {
            fn branch<'a>(model: &'a dyn Denoiser, b: &InvertedBranch) -> Branch<'a> {
                Branch { model, start: b.z_t.clone(), cond: b.target.clone(), guidance: b.guidance.clone() }
            }
            let (z, trace) = fldm_edit(
                branch(models.video.as_ref(), &prep.video),
                branch(models.image.as_ref(), &prep.image),
                &world.schedule,
                fusion,
            )?;
            (z, Some(trace))
        }
    };
    if !latent.is_finite() {
        return Err(Error::InvalidRange(format!("{} edit produced non-finite latents", method.name())));
    }
    let decoded = world.codec.decode(&latent)?;
    let metrics = world.metrics(&decoded, &cfg.target_class, prep.seed, fingerprint)?;
    Ok(EditOutcome { latent, decoded, trace, metrics })
}

/// One row per frame, columns `frame,d0,d1,…`.
pub fn write_video_csv(video: &VideoLatent, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["frame".to_string()];
    header.extend((0..video.dims()).map(|i| format!("d{i}")));
    w.write_record(&header)?;
    for k in 0..video.frames() {
        let mut row = vec![k.to_string()];
        row.extend(video.frame(k).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
