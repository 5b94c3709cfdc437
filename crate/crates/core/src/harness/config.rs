use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoisers::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion::{AlphaMode, FusionConfig};
use crate::null_text::NullTextConfig;
use crate::schedule::ScheduleParams;
use crate::world::{ClassSpec, SyntheticVideoPrior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub prior: SyntheticVideoPrior,
    /// `None` selects the identity codec.
    pub codec_seed: Option<u64>,
    pub embedder_seed: u64,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Analytic,
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserChoice {
    pub kind: DenoiserKind,
    /// Weights stem (`<stem>.json` + `<stem>.csv`) for trained models. When
    /// absent a trained model is fitted from the config's training section.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// Class-mean shrinkage for analytic models, in (0, 1].
    #[serde(default = "one")]
    pub text_fidelity: f64,
}

fn one() -> f64 {
    1.0
}

impl DenoiserChoice {
    pub fn analytic(text_fidelity: f64) -> Self {
        Self { kind: DenoiserKind::Analytic, weights: None, text_fidelity }
    }

    pub fn trained(weights: Option<PathBuf>) -> Self {
        Self { kind: DenoiserKind::Trained, weights, text_fidelity: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSettings {
    pub text_scale: f64,
    /// Second-condition scale for the image branch (dual guidance, source
    /// class as the image condition). Off when absent.
    #[serde(default)]
    pub image_scale: Option<f64>,
}

impl GuidanceSettings {
    /// Text 12.5 with image 1.5 on the image branch.
    pub fn dual_preset() -> Self {
        Self { text_scale: 12.5, image_scale: Some(1.5) }
    }
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self { text_scale: 12.5, image_scale: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub schedule: ScheduleParams,
    pub source_class: String,
    pub target_class: String,
    pub video_denoiser: DenoiserChoice,
    pub image_denoiser: DenoiserChoice,
    #[serde(default)]
    pub guidance: GuidanceSettings,
    pub fusion: FusionConfig,
    /// α schedule used by the α sweep (τ comes from `fusion`).
    #[serde(default = "default_sweep_mode")]
    pub alpha_sweep_mode: AlphaMode,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub taus: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub null_text: NullTextConfig,
    #[serde(default)]
    pub training: TrainConfig,
    /// Clips sampled per class for training.
    #[serde(default = "default_train_clips")]
    pub train_clips_per_class: usize,
    /// Reuse the video branch's inverted latent for the image branch.
    #[serde(default)]
    pub shared_inversion: bool,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default)]
    pub bootstrap_seed: u64,
    /// Not part of the fingerprint.
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
}

fn default_sweep_mode() -> AlphaMode {
    AlphaMode::Fixed
}

fn default_train_clips() -> usize {
    256
}

fn default_resamples() -> usize {
    2000
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// The pinned "standard world": 4-dim frames, 8 frames per clip, two
    /// classes with orthogonal anchors at distance 6 from the origin, ρ = 0.9,
    /// σ = 1, drift 0.1 per frame, T = 50 with β from 1e-3 to 0.06
    /// (ᾱ_T ≈ 0.21). The video model's class conditioning has fidelity 0.2,
    /// the image model is exact, and both branches start from the video
    /// model's inversion.
    pub fn standard() -> Self {
        let class = |label: &str, axis: usize| {
            let mut mean = vec![0.0; 4];
            mean[axis] = 6.0;
            ClassSpec { label: label.into(), mean, sigma: 1.0, drift: vec![0.0, 0.0, 0.1, 0.0] }
        };
        Self {
            world: WorldConfig {
                prior: SyntheticVideoPrior {
                    dims: 4,
                    frames: 8,
                    rho: 0.9,
                    classes: vec![class("a", 0), class("b", 1)],
                },
                codec_seed: Some(7),
                embedder_seed: 11,
                embed_dim: 8,
            },
            schedule: ScheduleParams { steps: 50, beta_start: 1e-3, beta_end: 0.06 },
            source_class: "a".into(),
            target_class: "b".into(),
            video_denoiser: DenoiserChoice::analytic(0.2),
            image_denoiser: DenoiserChoice::analytic(1.0),
            guidance: GuidanceSettings::default(),
            fusion: FusionConfig { tau: 25, alpha_tau: 0.5, mode: AlphaMode::LinearToOne },
            alpha_sweep_mode: AlphaMode::Fixed,
            alphas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            taus: vec![0, 10, 25, 40, 50],
            seeds: (0..20).collect(),
            null_text: NullTextConfig::default(),
            training: TrainConfig::default(),
            train_clips_per_class: default_train_clips(),
            shared_inversion: true,
            bootstrap_resamples: default_resamples(),
            bootstrap_seed: 0,
            output_dir: default_out(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.prior.validate()?;
        self.world.prior.class(&self.source_class)?;
        self.world.prior.class(&self.target_class)?;
        if self.world.embed_dim < self.world.prior.dims {
            return Err(Error::Config(format!(
                "embed_dim {} must be at least the frame dimension {}",
                self.world.embed_dim, self.world.prior.dims
            )));
        }
        let steps = self.schedule.steps;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        self.fusion.validate(steps)?;
        for a in &self.alphas {
            if !(0.0..=1.0).contains(a) {
                return Err(Error::Config(format!("alpha {a} outside [0, 1]")));
            }
        }
        if let Some(t) = self.taus.iter().find(|&&t| t > steps) {
            return Err(Error::Config(format!("tau {t} exceeds T = {steps}")));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        for (name, c) in [("video", &self.video_denoiser), ("image", &self.image_denoiser)] {
            if !(c.text_fidelity > 0.0 && c.text_fidelity <= 1.0) {
                return Err(Error::Config(format!("{name} denoiser text_fidelity {} outside (0, 1]", c.text_fidelity)));
            }
        }
        let g = &self.guidance;
        if std::iter::once(g.text_scale).chain(g.image_scale).any(|s| !(s.is_finite() && s >= 0.0)) {
            return Err(Error::Config("guidance scales must be finite and >= 0".into()));
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::Config("bootstrap_resamples must be positive".into()));
        }
        Ok(())
    }

    /// Stable hash of everything that affects results (the output directory
    /// is excluded), 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}
