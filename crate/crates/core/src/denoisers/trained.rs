//! Small feed-forward ε-predictor trained with the standard noise-prediction
//! objective, with hand-written reverse mode for parameters, latent inputs
//! and the condition vector.
//!
//! Layout per frame row: `[z (d) | time features (8) | condition (e)]`
//! → SiLU(W1·x + b1) → SiLU(W2·u + b2) → W3·h + b3, where `u` is the first
//! hidden state, or for the video role the first hidden state concatenated
//! with its mean over the clip's frames.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ConditionEmbedding, Denoiser, InputGradients, Role};
use crate::error::{Error, Result};
use crate::latent::VideoLatent;
use crate::rng;
use crate::schedule::NoiseSchedule;

pub const TIME_FEATURES: usize = 8;
const WEIGHTS_FORMAT: &str = "fldm-weights-v1";

fn time_features(t: usize) -> [f64; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut out = [0.0; TIME_FEATURES];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

impl Params {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, mix_in: usize, out: usize, r: &mut R) -> Self {
        let mut dense = |rows: usize, cols: usize| {
            let scale = (1.0 / cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| scale * r.sample::<f64, _>(StandardNormal))
        };
        Self {
            w1: dense(hidden, input),
            b1: Array1::zeros(hidden),
            w2: dense(hidden, mix_in),
            b2: Array1::zeros(hidden),
            w3: dense(out, hidden),
            b3: Array1::zeros(out),
        }
    }

    fn count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn sgd(&mut self, g: &Params, lr: f64) {
        self.w1.scaled_add(-lr, &g.w1);
        self.b1.scaled_add(-lr, &g.b1);
        self.w2.scaled_add(-lr, &g.w2);
        self.b2.scaled_add(-lr, &g.b2);
        self.w3.scaled_add(-lr, &g.w3);
        self.b3.scaled_add(-lr, &g.b3);
    }

    fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).chain(&self.w3).chain(&self.b3)
    }

    fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
            .chain(&mut self.w3)
            .chain(&mut self.b3)
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Named 2-D views; biases appear as single-column matrices.
    fn tensors(&self) -> Vec<(&'static str, Array2<f64>)> {
        let col = |b: &Array1<f64>| b.clone().insert_axis(Axis(1));
        vec![
            ("w1", self.w1.clone()),
            ("b1", col(&self.b1)),
            ("w2", self.w2.clone()),
            ("b2", col(&self.b2)),
            ("w3", self.w3.clone()),
            ("b3", col(&self.b3)),
        ]
    }
}

struct Cache {
    x: Array2<f64>,
    a1: Array2<f64>,
    u2: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedDenoiser {
    role: Role,
    dims: usize,
    cond_dim: usize,
    hidden: usize,
    steps: usize,
    schedule_hash: String,
    seed: u64,
    params: Params,
    labels: Vec<String>,
    class_vectors: Vec<Vec<f64>>,
}

impl TrainedDenoiser {
    /// Freshly initialized network. Class embeddings are seeded random unit
    /// vectors in `cond_dim` dimensions; the null embedding is the zero vector.
    pub fn init(
        role: Role,
        dims: usize,
        cond_dim: usize,
        hidden: usize,
        labels: &[String],
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<Self> {
        if dims == 0 || cond_dim == 0 || hidden == 0 {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if labels.is_empty() {
            return Err(Error::Config("need at least one class label".into()));
        }
        let mut r = rng::substream(seed, 0);
        let input = dims + TIME_FEATURES + cond_dim;
        let mix_in = match role {
            Role::Image => hidden,
            Role::Video => 2 * hidden,
        };
        let params = Params::init(input, hidden, mix_in, dims, &mut r);
        let mut er = rng::substream(seed, 1);
        let class_vectors = labels
            .iter()
            .map(|_| {
                let v: Vec<f64> = (0..cond_dim).map(|_| er.sample(StandardNormal)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let model = Self {
            role,
            dims,
            cond_dim,
            hidden,
            steps: schedule.steps(),
            schedule_hash: schedule.fingerprint(),
            seed,
            params,
            labels: labels.to_vec(),
            class_vectors,
        };
        if model.parameter_count() >= 100_000 {
            return Err(Error::Config(format!("network has {} parameters; limit is 100000", model.parameter_count())));
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// All weights and biases flattened in a fixed order (W1, b1, W2, b2, W3, b3).
    pub fn parameters(&self) -> Vec<f64> {
        self.params.flat_iter().copied().collect()
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape(self.parameter_count(), values.len()));
        }
        for (p, v) in self.params.flat_iter_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    /// Pulls `upstream` = ∂L/∂ε̂ back to the parameters, in the order of
    /// [`TrainedDenoiser::parameters`].
    pub fn parameter_vjp(
        &self,
        z: &VideoLatent,
        t: usize,
        cond: &ConditionEmbedding,
        upstream: &VideoLatent,
    ) -> Result<Vec<f64>> {
        let cache = self.forward_clip(z, t, cond)?;
        upstream.ensure_same_shape(z)?;
        let (grads, _) = self.backward(&cache, upstream.values(), z.frames(), true);
        Ok(grads.expect("parameter gradients requested").flat_iter().copied().collect())
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn input_width(&self) -> usize {
        self.dims + TIME_FEATURES + self.cond_dim
    }

    fn assemble(&self, z: &Array2<f64>, t: &[usize], cond: &[&[f64]]) -> Array2<f64> {
        let n = z.nrows();
        let mut x = Array2::zeros((n, self.input_width()));
        for r in 0..n {
            let mut row = x.row_mut(r);
            for i in 0..self.dims {
                row[i] = z[[r, i]];
            }
            for (i, v) in time_features(t[r]).iter().enumerate() {
                row[self.dims + i] = *v;
            }
            for (i, v) in cond[r].iter().enumerate() {
                row[self.dims + TIME_FEATURES + i] = *v;
            }
        }
        x
    }

    /// `group` rows form one clip for the frame-mixing layer.
    fn forward(&self, x: Array2<f64>, group: usize) -> Cache {
        let p = &self.params;
        let a1 = x.dot(&p.w1.t()) + &p.b1;
        let h1 = a1.mapv(silu);
        let u2 = match self.role {
            Role::Image => h1,
            Role::Video => {
                let n = h1.nrows();
                let mut u = Array2::zeros((n, 2 * self.hidden));
                u.slice_mut(s![.., ..self.hidden]).assign(&h1);
                for g0 in (0..n).step_by(group) {
                    let block = h1.slice(s![g0..g0 + group, ..]);
                    let mean = block.mean_axis(Axis(0)).expect("non-empty group");
                    for r in g0..g0 + group {
                        u.slice_mut(s![r, self.hidden..]).assign(&mean);
                    }
                }
                u
            }
        };
        let a2 = u2.dot(&p.w2.t()) + &p.b2;
        let h2 = a2.mapv(silu);
        let out = h2.dot(&p.w3.t()) + &p.b3;
        Cache { x, a1, u2, a2, h2, out }
    }

    /// Returns parameter gradients (when requested) and ∂L/∂x.
    fn backward(
        &self,
        c: &Cache,
        upstream: &Array2<f64>,
        group: usize,
        want_params: bool,
    ) -> (Option<Params>, Array2<f64>) {
        let p = &self.params;
        let dh2 = upstream.dot(&p.w3);
        let da2 = &dh2 * &c.a2.mapv(silu_grad);
        let du2 = da2.dot(&p.w2);
        let dh1 = match self.role {
            Role::Image => du2,
            Role::Video => {
                let n = du2.nrows();
                let mut dh1 = du2.slice(s![.., ..self.hidden]).to_owned();
                for g0 in (0..n).step_by(group) {
                    let pooled = du2.slice(s![g0..g0 + group, self.hidden..]).sum_axis(Axis(0)) / group as f64;
                    for r in g0..g0 + group {
                        let mut row = dh1.row_mut(r);
                        row += &pooled;
                    }
                }
                dh1
            }
        };
        let da1 = &dh1 * &c.a1.mapv(silu_grad);
        let dx = da1.dot(&p.w1);
        let grads = want_params.then(|| Params {
            w1: da1.t().dot(&c.x),
            b1: da1.sum_axis(Axis(0)),
            w2: da2.t().dot(&c.u2),
            b2: da2.sum_axis(Axis(0)),
            w3: upstream.t().dot(&c.h2),
            b3: upstream.sum_axis(Axis(0)),
        });
        (grads, dx)
    }

    fn check_input(&self, z: &VideoLatent, t: usize, cond: &ConditionEmbedding) -> Result<()> {
        if z.dims() != self.dims {
            return Err(Error::shape(format!("{} dims per frame", self.dims), z.dims()));
        }
        if t == 0 || t > self.steps {
            return Err(Error::IndexOutOfRange { index: t, lo: 1, hi: self.steps });
        }
        if cond.dim() != self.cond_dim {
            return Err(Error::shape(format!("{}-dim condition", self.cond_dim), cond.dim()));
        }
        Ok(())
    }

    fn forward_clip(&self, z: &VideoLatent, t: usize, cond: &ConditionEmbedding) -> Result<Cache> {
        self.check_input(z, t, cond)?;
        let n = z.frames();
        let ts = vec![t; n];
        let cs = vec![cond.vector.as_slice(); n];
        let x = self.assemble(z.values(), &ts, &cs);
        Ok(self.forward(x, n))
    }

    /// Writes `<stem>.json` (header) and `<stem>.csv` (tensor,row,col,value).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut tensors = self.params.tensors();
        let ev = Array2::from_shape_fn((self.labels.len(), self.cond_dim), |(i, j)| self.class_vectors[i][j]);
        tensors.push(("class_embeddings", ev));
        let header = WeightsHeader {
            format: WEIGHTS_FORMAT.into(),
            role: self.role,
            dims: self.dims,
            cond_dim: self.cond_dim,
            hidden: self.hidden,
            time_features: TIME_FEATURES,
            steps: self.steps,
            schedule_hash: self.schedule_hash.clone(),
            seed: self.seed,
            labels: self.labels.clone(),
            shapes: tensors.iter().map(|(n, t)| (n.to_string(), t.nrows(), t.ncols())).collect(),
        };
        if let Some(dir) = stem.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(with_ext(stem, "json"), serde_json::to_string_pretty(&header)?)?;
        let mut w = csv::Writer::from_path(with_ext(stem, "csv"))?;
        w.write_record(["tensor", "row", "col", "value"])?;
        for (name, t) in &tensors {
            for ((r, c), v) in t.indexed_iter() {
                w.write_record([name.to_string(), r.to_string(), c.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads weights written by [`save`](Self::save), checking the header
    /// against the tensor dump and against `schedule`.
    pub fn load(stem: &Path, schedule: &NoiseSchedule) -> Result<Self> {
        let header: WeightsHeader = serde_json::from_str(&fs::read_to_string(with_ext(stem, "json"))?)?;
        if header.format != WEIGHTS_FORMAT {
            return Err(Error::Header(format!("unknown format `{}`", header.format)));
        }
        if header.time_features != TIME_FEATURES {
            return Err(Error::Header("time feature width differs".into()));
        }
        if header.steps != schedule.steps() || header.schedule_hash != schedule.fingerprint() {
            return Err(Error::Header(format!(
                "weights trained for schedule {} ({} steps), got {} ({} steps)",
                header.schedule_hash,
                header.steps,
                schedule.fingerprint(),
                schedule.steps()
            )));
        }
        let mut model =
            Self::init(header.role, header.dims, header.cond_dim, header.hidden, &header.labels, schedule, header.seed)
                .map_err(|e| Error::Header(e.to_string()))?;
        let expected: Vec<(String, usize, usize)> = {
            let mut t: Vec<_> =
                model.params.tensors().iter().map(|(n, t)| (n.to_string(), t.nrows(), t.ncols())).collect();
            t.push(("class_embeddings".into(), header.labels.len(), header.cond_dim));
            t
        };
        if expected != header.shapes {
            return Err(Error::Header("tensor shapes disagree with architecture".into()));
        }
        let mut store: Vec<Array2<f64>> =
            expected.iter().map(|(_, r, c)| Array2::from_elem((*r, *c), f64::NAN)).collect();
        let mut rdr = csv::Reader::from_path(with_ext(stem, "csv"))?;
        for rec in rdr.records() {
            let rec = rec?;
            let bad = || Error::Header(format!("malformed weights row {:?}", rec));
            let idx = expected.iter().position(|(n, _, _)| n == &rec[0]).ok_or_else(bad)?;
            let r: usize = rec[1].parse().map_err(|_| bad())?;
            let c: usize = rec[2].parse().map_err(|_| bad())?;
            let v: f64 = rec[3].parse().map_err(|_| bad())?;
            *store[idx].get_mut((r, c)).ok_or_else(bad)? = v;
        }
        if store.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Header("weights file is missing values".into()));
        }
        let col = |a: &Array2<f64>| a.column(0).to_owned();
        model.params = Params {
            w1: store[0].clone(),
            b1: col(&store[1]),
            w2: store[2].clone(),
            b2: col(&store[3]),
            w3: store[4].clone(),
            b3: col(&store[5]),
        };
        model.class_vectors = store[6].outer_iter().map(|r| r.to_vec()).collect();
        Ok(model)
    }

    #[cfg(test)]
    pub(crate) fn zero_condition_biases(&mut self) {
        self.params.b1.fill(0.0);
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format: String,
    pub role: Role,
    pub dims: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub time_features: usize,
    pub steps: usize,
    pub schedule_hash: String,
    pub seed: u64,
    pub labels: Vec<String>,
    pub shapes: Vec<(String, usize, usize)>,
}

impl Denoiser for TrainedDenoiser {
    fn role(&self) -> Role {
        self.role
    }

    fn predict_eps(&self, z: &VideoLatent, t: usize, cond: &ConditionEmbedding) -> Result<VideoLatent> {
        Ok(VideoLatent::from_array(self.forward_clip(z, t, cond)?.out))
    }

    fn null_embedding(&self) -> ConditionEmbedding {
        ConditionEmbedding::null(vec![0.0; self.cond_dim])
    }

    fn class_embedding(&self, label: &str) -> Result<ConditionEmbedding> {
        let i = self.labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownClass(label.to_string()))?;
        Ok(ConditionEmbedding::new(self.class_vectors[i].clone()))
    }

    fn vjp(
        &self,
        z: &VideoLatent,
        t: usize,
        cond: &ConditionEmbedding,
        upstream: &VideoLatent,
    ) -> Result<InputGradients> {
        let cache = self.forward_clip(z, t, cond)?;
        upstream.ensure_same_shape(z)?;
        let (_, dx) = self.backward(&cache, upstream.values(), z.frames(), false);
        let latent = dx.slice(s![.., ..self.dims]).to_owned();
        let condition = dx.slice(s![.., self.dims + TIME_FEATURES..]).sum_axis(Axis(0)).to_vec();
        if let Some(i) = latent.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("latent entry {i} at t = {t}")));
        }
        Ok(InputGradients { latent: VideoLatent::from_array(latent), condition })
    }
}

/// A clean latent clip with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVideo {
    pub latent: VideoLatent,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Frames per step for the image role, clips per step for the video role.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub cond_dim: usize,
    /// Probability of replacing the condition with the null embedding.
    pub p_uncond: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Number of noisy held-out samples used for the held-out loss.
    pub holdout_samples: usize,
    pub loss_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 0.05,
            hidden: 64,
            cond_dim: 8,
            p_uncond: 0.1,
            seed: 0,
            holdout_fraction: 0.1,
            holdout_samples: 4096,
            loss_threshold: None,
        }
    }
}

impl TrainConfig {
    /// Size of the held-out prefix for a dataset of `n` clips (0 means the
    /// full set is used for evaluation).
    pub fn holdout_len(&self, n: usize) -> usize {
        ((n as f64 * self.holdout_fraction) as usize).min(n.saturating_sub(1))
    }

    /// Seed of the noisy draws used for held-out evaluation.
    pub fn eval_seed(&self) -> u64 {
        rng::derive_seed(self.seed, 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Minibatch loss per step.
    pub losses: Vec<f64>,
    pub initial_held_out: f64,
    pub held_out_loss: f64,
}

/// Mean squared ε-prediction error over `samples` noisy draws from `data`,
/// conditioned on each clip's class. Deterministic in `seed`, so two models
/// evaluated with the same arguments see the same noisy batch.
pub fn evaluate_eps_mse(
    model: &dyn Denoiser,
    data: &[LabeledVideo],
    schedule: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() || samples == 0 {
        return Err(Error::Config("held-out evaluation needs data".into()));
    }
    let mut r = rng::stream(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..samples {
        let item = &data[r.random_range(0..data.len())];
        let t = r.random_range(1..=schedule.steps());
        let ab = schedule.alpha_bar(t)?;
        let eps = item.latent.values().mapv(|_| r.sample::<f64, _>(StandardNormal));
        let zt = item.latent.values() * ab.sqrt() + &eps * (1.0 - ab).sqrt();
        let cond = model.class_embedding(&item.label)?;
        let pred = model.predict_eps(&VideoLatent::from_array(zt), t, &cond)?;
        total += (pred.values() - &eps).mapv(|v| v * v).sum();
        count += eps.len();
    }
    Ok(total / count as f64)
}

/// Fits a [`TrainedDenoiser`] by SGD on `E‖ε − ε̂(z_t, t, P)‖²`.
pub fn train_denoiser(
    role: Role,
    data: &[LabeledVideo],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(TrainedDenoiser, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) || !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(Error::Config("holdout_fraction and p_uncond must be in [0, 1)".into()));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("batch_size and learning_rate must be positive".into()));
    }
    let (frames, dims) = data[0].latent.shape();
    if data.iter().any(|v| v.latent.shape() != (frames, dims)) {
        return Err(Error::shape(format!("{frames}x{dims} clips"), "mixed clip shapes"));
    }
    let mut labels: Vec<String> = Vec::new();
    for v in data {
        if !labels.contains(&v.label) {
            labels.push(v.label.clone());
        }
    }
    let n_hold = cfg.holdout_len(data.len());
    let (held_out, train) = if n_hold > 0 { data.split_at(n_hold) } else { (data, data) };

    let mut model = TrainedDenoiser::init(role, dims, cfg.cond_dim, cfg.hidden, &labels, schedule, cfg.seed)?;
    let eval_seed = cfg.eval_seed();
    let initial_held_out = evaluate_eps_mse(&model, held_out, schedule, cfg.holdout_samples, eval_seed)?;

    let mut r = rng::substream(cfg.seed, 3);
    let null = vec![0.0; cfg.cond_dim];
    let mut losses = Vec::with_capacity(cfg.steps);
    let group = match role {
        Role::Image => 1,
        Role::Video => frames,
    };
    for step in 0..cfg.steps {
        let rows = cfg.batch_size * group;
        let mut z = Array2::zeros((rows, dims));
        let mut eps = Array2::zeros((rows, dims));
        let mut ts = Vec::with_capacity(rows);
        let mut conds: Vec<&[f64]> = Vec::with_capacity(rows);
        for b in 0..cfg.batch_size {
            let item = &train[r.random_range(0..train.len())];
            let t = r.random_range(1..=schedule.steps());
            let ab = schedule.alpha_bar(t)?;
            let cond: &[f64] = if r.random::<f64>() < cfg.p_uncond {
                &null
            } else {
                let i = labels.iter().position(|l| *l == item.label).expect("label collected above");
                &model.class_vectors[i]
            };
            let pick: Vec<usize> = match role {
                Role::Image => vec![r.random_range(0..frames)],
                Role::Video => (0..frames).collect(),
            };
            for (j, k) in pick.into_iter().enumerate() {
                let row = b * group + j;
                for i in 0..dims {
                    let e: f64 = r.sample(StandardNormal);
                    eps[[row, i]] = e;
                    z[[row, i]] = ab.sqrt() * item.latent.values()[[k, i]] + (1.0 - ab).sqrt() * e;
                }
                ts.push(t);
                conds.push(cond);
            }
        }
        let x = model.assemble(&z, &ts, &conds);
        let cache = model.forward(x, group);
        let diff = &cache.out - &eps;
        let loss = diff.mapv(|v| v * v).mean().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        losses.push(loss);
        let upstream = diff * (2.0 / (rows * dims) as f64);
        let (grads, _) = model.backward(&cache, &upstream, group, true);
        let grads = grads.expect("parameter gradients requested");
        model.params.sgd(&grads, cfg.learning_rate);
        if !model.params.all_finite() {
            return Err(Error::TrainingDiverged { step, loss: f64::NAN });
        }
    }
    let held_out_loss = evaluate_eps_mse(&model, held_out, schedule, cfg.holdout_samples, eval_seed)?;
    if let Some(th) = cfg.loss_threshold {
        if !(held_out_loss <= th) {
            return Err(Error::Config(format!("held-out loss {held_out_loss} above threshold {th}")));
        }
    }
    Ok((model, TrainReport { losses, initial_held_out, held_out_loss }))
}
