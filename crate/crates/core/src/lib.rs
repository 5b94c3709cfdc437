//! Toy latent-diffusion engine for editing videos by fusing an image
//! denoiser's latents into a video denoiser's trajectory.
//!
//! The worlds are Gaussian so every model has an exact posterior-mean
//! counterpart ([`denoisers::AnalyticGaussianDenoiser`]) next to a small
//! trained MLP ([`denoisers::TrainedDenoiser`]).

pub mod ddim;
pub mod denoisers;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod null_text;
pub mod rng;
pub mod schedule;
pub mod world;

pub use error::{Error, Result};
pub use latent::VideoLatent;
pub use schedule::{NoiseSchedule, ScheduleParams};
