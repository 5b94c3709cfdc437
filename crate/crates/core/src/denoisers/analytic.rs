use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use super::{ConditionEmbedding, Denoiser, Role};
use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::schedule::NoiseSchedule;
use crate::world::{LatentCodec, SyntheticVideoPrior};

/// A Gaussian `N(mean, U diag(λ) Uᵀ)` kept in eigen-coordinates so that
/// conditioning on a noisy observation is a diagonal operation.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: DVector<f64>,
    basis: DMatrix<f64>,
    variances: DVector<f64>,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::shape(format!("{n}x{n} covariance"), format!("{:?}", cov.shape())));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let variances = eig.eigenvalues.map(|v| v.max(0.0));
        Ok(Self { mean, basis: eig.eigenvectors, variances })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// For `z_t = √ᾱ z_0 + √(1−ᾱ) ε` with `z_0` from this component, returns
    /// `E[z_0 | z_t]` and `log p(z_t)` up to the shared `2π` constant.
    pub fn condition_on(&self, zt: &DVector<f64>, alpha_bar: f64) -> (DVector<f64>, f64) {
        let sa = alpha_bar.sqrt();
        let resid = zt - &self.mean * sa;
        let y = self.basis.tr_mul(&resid);
        let mut gain = DVector::zeros(y.len());
        let mut loglik = 0.0;
        for i in 0..y.len() {
            let lam = self.variances[i];
            let obs_var = alpha_bar * lam + (1.0 - alpha_bar);
            gain[i] = lam * sa / obs_var * y[i];
            loglik -= 0.5 * (y[i] * y[i] / obs_var + obs_var.ln());
        }
        (&self.mean + &self.basis * gain, loglik)
    }
}

/// Exact posterior-mean ε-predictor for the Gaussian video prior pushed
/// through the codec into latent space.
///
/// Condition vectors are class weights (one entry per class). A class
/// embedding is one-hot; the null embedding selects the uniform class mixture,
/// whose posterior mean mixes the per-class means by their responsibilities.
///
/// Image role conditions each frame on the class's frame marginal with the
/// frame index unknown (moment-matched over frame positions), so predictions
/// are equivariant under frame permutations. Video role uses the full joint
/// frames·dims covariance.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    role: Role,
    schedule: NoiseSchedule,
    labels: Vec<String>,
    components: Vec<GaussianComponent>,
    frame_dims: usize,
    frames: usize,
}

impl AnalyticGaussianDenoiser {
    pub fn new(prior: &SyntheticVideoPrior, codec: &LatentCodec, schedule: NoiseSchedule, role: Role) -> Result<Self> {
        Self::with_text_fidelity(prior, codec, schedule, role, 1.0)
    }

    /// `text_fidelity` λ ∈ (0, 1] pulls every frame-0 class mean toward the
    /// average class mean (μ̄ + λ(μ_c − μ̄)) and rescales it back to |μ_c|,
    /// modelling a denoiser whose class conditioning leaks toward the other
    /// classes without losing signal energy. λ = 1 is the exact prior.
    pub fn with_text_fidelity(
        prior: &SyntheticVideoPrior,
        codec: &LatentCodec,
        schedule: NoiseSchedule,
        role: Role,
        text_fidelity: f64,
    ) -> Result<Self> {
        prior.validate()?;
        if !(text_fidelity > 0.0 && text_fidelity <= 1.0) {
            return Err(Error::Config(format!("text fidelity {text_fidelity} outside (0, 1]")));
        }
        if codec.dims() != prior.dims {
            return Err(Error::shape(format!("{}-dim codec", prior.dims), codec.dims()));
        }
        let mut believed = prior.clone();
        if text_fidelity < 1.0 {
            let n = prior.classes.len() as f64;
            let centre = prior
                .classes
                .iter()
                .fold(DVector::zeros(prior.dims), |acc, c| acc + DVector::from_column_slice(&c.mean))
                / n;
            for c in &mut believed.classes {
                let m = DVector::from_column_slice(&c.mean);
                let pulled = &centre + (&m - &centre) * text_fidelity;
                let scale = if pulled.norm() > 0.0 { m.norm() / pulled.norm() } else { 0.0 };
                if scale == 0.0 && m.norm() > 0.0 {
                    return Err(Error::ZeroVector(format!("class `{}` mean after pulling", c.label)));
                }
                c.mean = (pulled * scale).iter().copied().collect();
            }
        }
        let components = believed
            .classes
            .iter()
            .map(|c| {
                let (mean, cov) = match role {
                    Role::Image => believed.frame_marginal(c),
                    Role::Video => (believed.video_mean(c), believed.video_covariance(c)),
                };
                let (lm, lc) = codec.push_gaussian(&mean, &cov);
                GaussianComponent::new(lm, lc)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            role,
            schedule,
            labels: prior.classes.iter().map(|c| c.label.clone()).collect(),
            components,
            frame_dims: prior.dims,
            frames: prior.frames,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    fn class_weights(&self, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        let k = self.labels.len();
        if cond.is_null {
            return Ok(vec![1.0 / k as f64; k]);
        }
        if cond.vector.len() != k {
            return Err(Error::shape(format!("{k}-dim class weights"), cond.vector.len()));
        }
        if cond.vector.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidRange("class weights must be finite and >= 0".into()));
        }
        let total: f64 = cond.vector.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroVector("class weights".into()));
        }
        Ok(cond.vector.iter().map(|w| w / total).collect())
    }

    /// `E[z_0 | z_t]` under the class mixture given by `weights`.
    fn posterior_mean(&self, zt: &DVector<f64>, alpha_bar: f64, weights: &[f64]) -> DVector<f64> {
        let active: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
        if let [only] = active.as_slice() {
            return self.components[*only].condition_on(zt, alpha_bar).0;
        }
        let parts: Vec<(f64, DVector<f64>)> = active
            .iter()
            .map(|&i| {
                let (m, ll) = self.components[i].condition_on(zt, alpha_bar);
                (weights[i].ln() + ll, m)
            })
            .collect();
        let top = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = parts.iter().map(|p| (p.0 - top).exp()).sum();
        parts.iter().fold(DVector::zeros(zt.len()), |acc, (lw, m)| acc + m * ((lw - top).exp() / norm))
    }

    fn eps_from_vector(&self, zt: &DVector<f64>, alpha_bar: f64, weights: &[f64]) -> DVector<f64> {
        let x0 = self.posterior_mean(zt, alpha_bar, weights);
        (zt - x0 * alpha_bar.sqrt()) / (1.0 - alpha_bar).sqrt()
    }

    fn predict_weighted(&self, z: &VideoLatent, t: usize, weights: &[f64]) -> Result<VideoLatent> {
        self.schedule.check_step(t)?;
        let ab = self.schedule.alpha_bar(t)?;
        let (f, d) = z.shape();
        if d != self.frame_dims {
            return Err(Error::shape(format!("{} dims per frame", self.frame_dims), d));
        }
        let mut out = Array2::zeros((f, d));
        match self.role {
            Role::Image => {
                for k in 0..f {
                    let row = DVector::from_iterator(d, z.frame(k).iter().copied());
                    let eps = self.eps_from_vector(&row, ab, weights);
                    for i in 0..d {
                        out[[k, i]] = eps[i];
                    }
                }
            }
            Role::Video => {
                if f != self.frames {
                    return Err(Error::shape(format!("{} frames", self.frames), f));
                }
                let flat = DVector::from_iterator(f * d, z.values().iter().copied());
                let eps = self.eps_from_vector(&flat, ab, weights);
                for (o, e) in out.iter_mut().zip(eps.iter()) {
                    *o = *e;
                }
            }
        }
        Ok(VideoLatent::from_array(out))
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn role(&self) -> Role {
        self.role
    }

    fn predict_eps(&self, z: &VideoLatent, t: usize, cond: &ConditionEmbedding) -> Result<VideoLatent> {
        let w = self.class_weights(cond)?;
        self.predict_weighted(z, t, &w)
    }

    fn null_embedding(&self) -> ConditionEmbedding {
        ConditionEmbedding::null(vec![0.0; self.labels.len()])
    }

    fn class_embedding(&self, label: &str) -> Result<ConditionEmbedding> {
        let i = self.labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownClass(label.to_string()))?;
        let mut v = vec![0.0; self.labels.len()];
        v[i] = 1.0;
        Ok(ConditionEmbedding::new(v))
    }

    /// The image channel names the class the output should stay close to.
    /// A non-null text condition takes precedence over it; with null text the
    /// image class is used; with both null the uniform mixture is used.
    fn predict_eps_dual(
        &self,
        z: &VideoLatent,
        t: usize,
        text: &ConditionEmbedding,
        image: &ConditionEmbedding,
    ) -> Result<VideoLatent> {
        let w = if !text.is_null { self.class_weights(text)? } else { self.class_weights(image)? };
        self.predict_weighted(z, t, &w)
    }
}
