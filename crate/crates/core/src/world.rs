//! The toy data universe: a class-conditioned Gaussian video prior with
//! AR(1) temporal coupling, an affine latent codec, and a frozen linear
//! embedder used by the metrics.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    /// Frame-0 mean μ_c.
    pub mean: Vec<f64>,
    pub sigma: f64,
    /// Per-frame velocity v_c; frame k has mean μ_c + k·v_c.
    pub drift: Vec<f64>,
}

/// Ground-truth generator for toy videos. Frame noise is a stationary AR(1)
/// process, so the stacked video of class c is Gaussian with block covariance
/// σ_c²·ρ^{|j−k|}·I_d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideoPrior {
    pub dims: usize,
    pub frames: usize,
    pub rho: f64,
    pub classes: Vec<ClassSpec>,
}

impl SyntheticVideoPrior {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.frames == 0 {
            return Err(Error::Config("prior needs dims >= 1 and frames >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho = {} outside [0, 1)", self.rho)));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("prior has no classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::Config(format!("duplicate class label `{}`", c.label)));
            }
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(Error::Config(format!("class `{}`: sigma must be > 0", c.label)));
            }
            if c.mean.len() != self.dims || c.drift.len() != self.dims {
                return Err(Error::Config(format!("class `{}`: mean/drift must have {} entries", c.label, self.dims)));
            }
            if c.mean.iter().chain(&c.drift).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("class `{}`: non-finite mean/drift", c.label)));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes.iter().position(|c| c.label == label).ok_or_else(|| Error::UnknownClass(label.to_string()))
    }

    pub fn class(&self, label: &str) -> Result<&ClassSpec> {
        Ok(&self.classes[self.class_index(label)?])
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.label.as_str())
    }

    /// Mean of frame `k` for class `c`.
    pub fn frame_mean(c: &ClassSpec, k: usize) -> Vec<f64> {
        c.mean.iter().zip(&c.drift).map(|(m, v)| m + k as f64 * v).collect()
    }

    /// Mean of the stacked (frames·dims) video vector.
    pub fn video_mean(&self, c: &ClassSpec) -> DVector<f64> {
        DVector::from_iterator(self.frames * self.dims, (0..self.frames).flat_map(|k| Self::frame_mean(c, k)))
    }

    /// ρ^{|j−k|} over frame pairs.
    pub fn temporal_correlation(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.frames, self.frames, |j, k| self.rho.powi(j.abs_diff(k) as i32))
    }

    /// Full covariance of the stacked video: σ²·R ⊗ I_d.
    pub fn video_covariance(&self, c: &ClassSpec) -> DMatrix<f64> {
        let r = self.temporal_correlation();
        let n = self.frames * self.dims;
        let var = c.sigma * c.sigma;
        DMatrix::from_fn(n, n, |a, b| {
            let (ja, ia) = (a / self.dims, a % self.dims);
            let (jb, ib) = (b / self.dims, b % self.dims);
            if ia == ib {
                var * r[(ja, jb)]
            } else {
                0.0
            }
        })
    }

    /// Moment-matched single-frame marginal when the frame index is unknown:
    /// mean μ + k̄·v and covariance σ²I + Var(k)·v vᵀ, with k uniform over frames.
    pub fn frame_marginal(&self, c: &ClassSpec) -> (DVector<f64>, DMatrix<f64>) {
        let f = self.frames as f64;
        let k_mean = (f - 1.0) / 2.0;
        let k_var = (f * f - 1.0) / 12.0;
        let v = DVector::from_column_slice(&c.drift);
        let mean = DVector::from_column_slice(&c.mean) + &v * k_mean;
        let cov = DMatrix::identity(self.dims, self.dims) * (c.sigma * c.sigma) + &v * v.transpose() * k_var;
        (mean, cov)
    }

    /// Draws one clean video of class `label`; deterministic in `seed`.
    pub fn sample_video(&self, label: &str, seed: u64) -> Result<VideoLatent> {
        let mut r = rng::stream(seed);
        self.sample_video_with(label, &mut r)
    }

    pub fn sample_video_with<R: Rng + ?Sized>(&self, label: &str, r: &mut R) -> Result<VideoLatent> {
        let c = self.class(label)?;
        let innov = (1.0 - self.rho * self.rho).sqrt();
        let mut out = Array2::zeros((self.frames, self.dims));
        let mut noise: Vec<f64> = (0..self.dims).map(|_| r.sample(StandardNormal)).collect();
        for k in 0..self.frames {
            if k > 0 {
                for n in noise.iter_mut() {
                    let xi: f64 = r.sample(StandardNormal);
                    *n = self.rho * *n + innov * xi;
                }
            }
            for i in 0..self.dims {
                out[[k, i]] = c.mean[i] + k as f64 * c.drift[i] + c.sigma * noise[i];
            }
        }
        Ok(VideoLatent::from_array(out))
    }
}

/// Frame-wise affine map `z = A x + b` standing in for a VAE encoder, with
/// its exact inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    forward: DMatrix<f64>,
    inverse: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LatentCodec {
    pub fn identity(dims: usize) -> Self {
        Self {
            forward: DMatrix::identity(dims, dims),
            inverse: DMatrix::identity(dims, dims),
            offset: DVector::zeros(dims),
        }
    }

    /// Seeded random rotation times a diagonal scaling in [0.5, 2], plus an offset
    /// with standard-normal entries.
    pub fn random(dims: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed);
        let q = random_orthonormal(dims, dims, &mut r);
        let scales: Vec<f64> = (0..dims).map(|_| r.random_range(0.5..=2.0)).collect();
        let offset = DVector::from_fn(dims, |_, _| r.sample(StandardNormal));
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&scales));
        let s_inv = DMatrix::from_diagonal(&DVector::from_iterator(dims, scales.iter().map(|v| 1.0 / v)));
        Self { forward: &q * &s, inverse: &s_inv * q.transpose(), offset }
    }

    pub fn from_parts(forward: DMatrix<f64>, offset: DVector<f64>) -> Result<Self> {
        let d = forward.nrows();
        if forward.ncols() != d || offset.len() != d {
            return Err(Error::shape(format!("{d}x{d} matrix, {d} offset"), "mismatched codec parts"));
        }
        let inverse = forward.clone().try_inverse().ok_or_else(|| Error::Config("codec matrix is singular".into()))?;
        Ok(Self { forward, inverse, offset })
    }

    pub fn dims(&self) -> usize {
        self.offset.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.forward
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn condition_number(&self) -> f64 {
        let sv = self.forward.singular_values();
        sv.max() / sv.min()
    }

    fn check(&self, v: &VideoLatent) -> Result<()> {
        if v.dims() != self.dims() {
            return Err(Error::shape(format!("{} latent dims", self.dims()), format!("{} dims", v.dims())));
        }
        Ok(())
    }

    pub fn encode(&self, video: &VideoLatent) -> Result<VideoLatent> {
        self.check(video)?;
        Ok(self.map_frames(video, |x| &self.forward * x + &self.offset))
    }

    pub fn decode(&self, latent: &VideoLatent) -> Result<VideoLatent> {
        self.check(latent)?;
        Ok(self.map_frames(latent, |z| &self.inverse * (z - &self.offset)))
    }

    fn map_frames(&self, v: &VideoLatent, f: impl Fn(DVector<f64>) -> DVector<f64>) -> VideoLatent {
        let mut out = Array2::zeros(v.shape());
        for k in 0..v.frames() {
            let x = DVector::from_iterator(v.dims(), v.frame(k).iter().copied());
            let y = f(x);
            for (i, val) in y.iter().enumerate() {
                out[[k, i]] = *val;
            }
        }
        VideoLatent::from_array(out)
    }

    /// Pushes a Gaussian on stacked frames through the codec (frame-wise A, b).
    pub fn push_gaussian(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dims();
        let frames = mean.len() / d;
        let mut big = DMatrix::zeros(frames * d, frames * d);
        let mut shift = DVector::zeros(frames * d);
        for k in 0..frames {
            big.view_mut((k * d, k * d), (d, d)).copy_from(&self.forward);
            shift.rows_mut(k * d, d).copy_from(&self.offset);
        }
        (&big * mean + shift, &big * cov * big.transpose())
    }
}

/// Orthonormal columns (rows > cols) or orthonormal rows (rows < cols).
fn random_orthonormal<R: Rng + ?Sized>(rows: usize, cols: usize, r: &mut R) -> DMatrix<f64> {
    let tall = rows >= cols;
    let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::from_fn(m, n, |_, _| r.sample(StandardNormal));
    let q = g.qr().q();
    if tall {
        q
    } else {
        q.transpose()
    }
}

/// Fixed linear feature extractor plus per-class text anchors, used in place
/// of a learned image/text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEmbedder {
    projection: DMatrix<f64>,
    anchors: Vec<(String, Vec<f64>)>,
}

impl FrozenEmbedder {
    /// Seeded `embed_dim × dims` projection. Each class's text anchor is the
    /// normalized projection of its frame-0 mean.
    pub fn new(prior: &SyntheticVideoPrior, embed_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("embedder needs embed_dim >= 1".into()));
        }
        let mut r = rng::stream(seed);
        let projection = random_orthonormal(embed_dim, prior.dims, &mut r);
        Self::with_projection(prior, projection)
    }

    pub fn with_projection(prior: &SyntheticVideoPrior, projection: DMatrix<f64>) -> Result<Self> {
        if projection.ncols() != prior.dims {
            return Err(Error::shape(format!("{} columns", prior.dims), projection.ncols()));
        }
        let mut anchors = Vec::with_capacity(prior.classes.len());
        for c in &prior.classes {
            let p = &projection * DVector::from_column_slice(&c.mean);
            let unit = normalize(p.as_slice(), &format!("text anchor `{}`", c.label))?;
            anchors.push((c.label.clone(), unit));
        }
        Ok(Self { projection, anchors })
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn projection(&self) -> &DMatrix<f64> {
        &self.projection
    }

    pub fn embed_frames(&self, video: &VideoLatent) -> Result<Vec<Vec<f64>>> {
        if video.dims() != self.projection.ncols() {
            return Err(Error::shape(self.projection.ncols(), video.dims()));
        }
        (0..video.frames())
            .map(|k| {
                let x = DVector::from_iterator(video.dims(), video.frame(k).iter().copied());
                let p = &self.projection * x;
                normalize(p.as_slice(), &format!("frame {k}"))
            })
            .collect()
    }

    pub fn embed_text(&self, label: &str) -> Result<Vec<f64>> {
        self.anchors
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, a)| a.clone())
            .ok_or_else(|| Error::UnknownClass(label.to_string()))
    }
}

fn normalize(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::ZeroVector(what.to_string()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prior(rho: f64, sigma: f64) -> SyntheticVideoPrior {
        SyntheticVideoPrior {
            dims: 2,
            frames: 3,
            rho,
            classes: vec![
                ClassSpec { label: "a".into(), mean: vec![1.0, 0.0], sigma, drift: vec![0.0, 0.5] },
                ClassSpec { label: "b".into(), mean: vec![0.0, 2.0], sigma, drift: vec![0.0, 0.0] },
            ],
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn degenerate_prior_gives_means() {
        let p = prior(0.5, 1e-300);
        let v = p.sample_video("a", 3).unwrap();
        for k in 0..3 {
            let want = [1.0, 0.5 * k as f64];
            for i in 0..2 {
                assert!((v.values()[[k, i]] - want[i]).abs() < 1e-290);
            }
        }
    }

    #[test]
    fn unknown_class() {
        assert!(matches!(prior(0.0, 1.0).sample_video("zebra", 0), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut p = prior(0.2, 1.0);
        p.rho = 1.0;
        assert!(p.validate().is_err());
        let mut p = prior(0.2, 1.0);
        p.classes[1].label = "a".into();
        assert!(p.validate().is_err());
        let mut p = prior(0.2, 1.0);
        p.classes[0].sigma = 0.0;
        assert!(p.validate().is_err());
        assert!(prior(0.2, 1.0).validate().is_ok());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = prior(0.7, 1.0);
        assert_eq!(p.sample_video("a", 9).unwrap(), p.sample_video("a", 9).unwrap());
        assert_ne!(p.sample_video("a", 9).unwrap(), p.sample_video("a", 10).unwrap());
    }

    #[test]
    fn codec_round_trip_and_identity() {
        let codec = LatentCodec::random(4, 17);
        assert!(codec.condition_number() < 100.0);
        let p = SyntheticVideoPrior {
            dims: 4,
            frames: 5,
            rho: 0.3,
            classes: vec![ClassSpec {
                label: "x".into(),
                mean: vec![1.0, -2.0, 3.0, 0.5],
                sigma: 2.0,
                drift: vec![0.1; 4],
            }],
        };
        let v = p.sample_video("x", 1).unwrap();
        let back = codec.decode(&codec.encode(&v).unwrap()).unwrap();
        assert!(back.distance(&v).unwrap() < 1e-10);
        let id = LatentCodec::identity(4);
        assert_eq!(id.encode(&v).unwrap(), v);
        assert!(codec.encode(&VideoLatent::zeros(2, 3)).is_err());
    }

    #[test]
    fn codec_of_zero_video_is_offset() {
        let codec = LatentCodec::random(3, 5);
        let z = codec.encode(&VideoLatent::zeros(4, 3)).unwrap();
        for k in 0..4 {
            for i in 0..3 {
                assert_eq!(z.values()[[k, i]], codec.offset()[i]);
            }
        }
    }

    #[test]
    fn codec_scales_within_design_range() {
        for seed in 0..20 {
            let c = LatentCodec::random(4, seed);
            let sv = c.matrix().singular_values();
            assert!(sv.min() >= 0.5 - 1e-12 && sv.max() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn embedder_anchor_geometry() {
        // identity projection, orthogonal means
        let p = SyntheticVideoPrior {
            dims: 2,
            frames: 2,
            rho: 0.0,
            classes: vec![
                ClassSpec { label: "a".into(), mean: vec![3.0, 0.0], sigma: 1.0, drift: vec![0.0, 0.0] },
                ClassSpec { label: "b".into(), mean: vec![0.0, 3.0], sigma: 1.0, drift: vec![0.0, 0.0] },
            ],
        };
        let e = FrozenEmbedder::with_projection(&p, DMatrix::identity(2, 2)).unwrap();
        let ta = e.embed_text("a").unwrap();
        let tb = e.embed_text("b").unwrap();
        assert_eq!(dot(&ta, &tb), 0.0);
        let at_mean = VideoLatent::from_rows(&[vec![3.0, 0.0], vec![1.5, 1.5]]).unwrap();
        let feats = e.embed_frames(&at_mean).unwrap();
        assert!((dot(&feats[0], &ta) - 1.0).abs() < 1e-15);
        assert!((dot(&feats[1], &ta) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((dot(&feats[1], &tb) - 0.5f64.sqrt()).abs() < 1e-12);
        let zero = VideoLatent::zeros(1, 2);
        assert!(matches!(e.embed_frames(&zero), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn embedder_is_seed_deterministic_and_normalized() {
        let p = prior(0.0, 1.0);
        let a = FrozenEmbedder::new(&p, 6, 42).unwrap();
        let b = FrozenEmbedder::new(&p, 6, 42).unwrap();
        assert_eq!(a, b);
        for f in a.embed_frames(&p.sample_video("a", 1).unwrap()).unwrap() {
            assert!((dot(&f, &f) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moments_match_closed_form() {
        // Monte-Carlo: per-frame means within 4σ/√N; lag-1 noise correlation for ρ = 0 and ρ = 0.9
        let n = 10_000;
        for (rho, want_lag1, tol) in [(0.0, 0.0, 0.02), (0.9, 0.9, 0.02)] {
            let p = prior(rho, 1.0);
            let c = p.class("a").unwrap().clone();
            let mut r = rng::stream(123);
            let mut sums = vec![0.0; 6];
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for _ in 0..n {
                let v = p.sample_video_with("a", &mut r).unwrap();
                for k in 0..3 {
                    for i in 0..2 {
                        sums[k * 2 + i] += v.values()[[k, i]];
                    }
                }
                let m0 = SyntheticVideoPrior::frame_mean(&c, 0);
                let m1 = SyntheticVideoPrior::frame_mean(&c, 1);
                for i in 0..2 {
                    let x = v.values()[[0, i]] - m0[i];
                    let y = v.values()[[1, i]] - m1[i];
                    sxy += x * y;
                    sxx += x * x;
                    syy += y * y;
                }
            }
            for k in 0..3 {
                let m = SyntheticVideoPrior::frame_mean(&c, k);
                for i in 0..2 {
                    let emp = sums[k * 2 + i] / n as f64;
                    assert!((emp - m[i]).abs() < 4.0 * c.sigma / (n as f64).sqrt());
                }
            }
            let corr = sxy / (sxx * syy).sqrt();
            assert!((corr - want_lag1).abs() < tol, "rho {rho}: corr {corr}");
        }
    }
}
