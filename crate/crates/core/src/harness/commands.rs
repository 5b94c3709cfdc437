use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::denoisers::{evaluate_eps_mse, train_denoiser, AnalyticGaussianDenoiser, Role};
use crate::error::{Error, Result};
use crate::fusion::{AlphaMode, FusionConfig};
use crate::rng;

use super::config::ExperimentConfig;
use super::pipeline::{prepare, run_method, write_video_csv, Method, Models, Prepared, World};
use super::stats::{bootstrap_mean, bootstrap_paired_diff, Interval};

/// Result of one (setting, seed) cell. Failed cells keep their place with
/// NaN metrics and the error message.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    /// Grid value as written in the CSV (`0.25`, `linear-to-one`, …).
    pub key: String,
    pub method: &'static str,
    pub seed: u64,
    pub frame_consistency: f64,
    pub textual_alignment: f64,
    pub fused_steps: Option<usize>,
    /// ‖z^V − z^I‖ before the first fusion.
    pub first_divergence: Option<f64>,
    /// Image-branch weight at the last fused step.
    pub final_image_weight: Option<f64>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub key: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub consistency: Interval,
    pub alignment: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Contrast {
    pub metric: &'static str,
    pub minuend: String,
    pub subtrahend: String,
    pub diff: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub cells: Vec<CellResult>,
    pub summaries: Vec<Summary>,
    pub contrasts: Vec<Contrast>,
    pub files: Vec<PathBuf>,
}

/// A built config: world, models, fingerprint and a bounded worker pool.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub world: World,
    pub models: Models,
    pub fingerprint: String,
    pool: rayon::ThreadPool,
}

impl Session {
    pub fn new(cfg: ExperimentConfig, jobs: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let world = World::build(&cfg)?;
        let models = Models::build(&cfg, &world)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.unwrap_or(0))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self { fingerprint: cfg.fingerprint(), cfg, world, models, pool })
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.cfg.output_dir)?;
        Ok(&self.cfg.output_dir)
    }

    pub fn prepare_all(&self) -> Vec<std::result::Result<Prepared, String>> {
        self.pool.install(|| {
            self.cfg
                .seeds
                .par_iter()
                .map(|&s| prepare(&self.cfg, &self.world, &self.models, s).map_err(|e| e.to_string()))
                .collect()
        })
    }

    /// Runs every (grid entry, seed) cell; order is grid-major, seed-minor.
    pub fn run_cells(&self, grid: &[(String, Method)]) -> Vec<CellResult> {
        let prepared = self.prepare_all();
        let jobs: Vec<(&(String, Method), &std::result::Result<Prepared, String>, u64)> =
            grid.iter().flat_map(|g| prepared.iter().zip(&self.cfg.seeds).map(move |(p, &s)| (g, p, s))).collect();
        self.pool.install(|| {
            jobs.par_iter()
                .map(|&((key, method), prep, seed)| {
                    let outcome = prep.as_ref().map_err(|e| e.clone()).and_then(|p| {
                        run_method(&self.cfg, &self.world, &self.models, p, *method, &self.fingerprint)
                            .map_err(|e| e.to_string())
                    });
                    let mut cell = CellResult {
                        key: key.clone(),
                        method: method.name(),
                        seed,
                        frame_consistency: f64::NAN,
                        textual_alignment: f64::NAN,
                        fused_steps: None,
                        first_divergence: None,
                        final_image_weight: None,
                        error: None,
                    };
                    match outcome {
                        Ok(o) => {
                            cell.frame_consistency = o.metrics.frame_consistency;
                            cell.textual_alignment = o.metrics.textual_alignment;
                            if let Some(tr) = &o.trace {
                                cell.fused_steps = Some(tr.fused_count());
                                cell.first_divergence = tr.first_fused().map(|r| r.divergence);
                                cell.final_image_weight =
                                    tr.rows.iter().rev().find_map(|r| r.alpha_used).map(|a| 1.0 - a);
                            }
                        }
                        Err(e) => cell.error = Some(e),
                    }
                    cell
                })
                .collect()
        })
    }

    fn summarize(&self, cells: &[CellResult], keys: &[String]) -> Vec<Summary> {
        keys.iter()
            .enumerate()
            .map(|(i, key)| {
                let group: Vec<&CellResult> = cells.iter().filter(|c| &c.key == key).collect();
                let ok: Vec<&&CellResult> = group.iter().filter(|c| c.is_ok()).collect();
                let seed = rng::derive_seed(self.cfg.bootstrap_seed, i as u64);
                let cons: Vec<f64> = ok.iter().map(|c| c.frame_consistency).collect();
                let align: Vec<f64> = ok.iter().map(|c| c.textual_alignment).collect();
                Summary {
                    key: key.clone(),
                    n_ok: ok.len(),
                    n_failed: group.len() - ok.len(),
                    consistency: bootstrap_mean(&cons, self.cfg.bootstrap_resamples, seed),
                    alignment: bootstrap_mean(&align, self.cfg.bootstrap_resamples, seed ^ 1),
                }
            })
            .collect()
    }

    /// Paired-by-seed bootstrap of `metric(minuend) − metric(subtrahend)`,
    /// over seeds where both cells succeeded.
    fn contrast(&self, cells: &[CellResult], metric: &'static str, minuend: &str, subtrahend: &str) -> Contrast {
        let pick = |c: &CellResult| match metric {
            "frame_consistency" => c.frame_consistency,
            _ => c.textual_alignment,
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for &seed in &self.cfg.seeds {
            let find = |k: &str| cells.iter().find(|c| c.key == k && c.seed == seed && c.is_ok());
            if let (Some(x), Some(y)) = (find(minuend), find(subtrahend)) {
                a.push(pick(x));
                b.push(pick(y));
            }
        }
        let seed = rng::derive_seed(self.cfg.bootstrap_seed ^ 0xC0_7A57, a.len() as u64);
        Contrast {
            metric,
            minuend: minuend.to_string(),
            subtrahend: subtrahend.to_string(),
            diff: bootstrap_paired_diff(&a, &b, self.cfg.bootstrap_resamples, seed),
        }
    }

    /// Writes `{name}_cells.csv` (unless `cells_file` is false), the summary
    /// `{summary}.csv`, `{name}_contrasts.csv` and `{name}_errors.csv`.
    #[allow(clippy::too_many_arguments)]
    fn write_outputs(
        &self,
        name: &str,
        summary: &str,
        key_column: &str,
        cells_file: bool,
        cells: &[CellResult],
        summaries: &[Summary],
        contrasts: &[Contrast],
    ) -> Result<Vec<PathBuf>> {
        let dir = self.out_dir()?;
        let fp = &self.fingerprint;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();

        let mut files = Vec::new();
        if cells_file {
            let cells_path = dir.join(format!("{name}_cells.csv"));
            let mut w = csv::Writer::from_path(&cells_path)?;
            w.write_record([
                key_column,
                "method",
                "seed",
                "frame_consistency",
                "textual_alignment",
                "fused_steps",
                "first_divergence",
                "final_image_weight",
                "config_fingerprint",
            ])?;
            for c in cells {
                w.write_record([
                    c.key.clone(),
                    c.method.to_string(),
                    c.seed.to_string(),
                    c.frame_consistency.to_string(),
                    c.textual_alignment.to_string(),
                    c.fused_steps.map(|n| n.to_string()).unwrap_or_default(),
                    opt(c.first_divergence),
                    opt(c.final_image_weight),
                    fp.clone(),
                ])?;
            }
            w.flush()?;
            files.push(cells_path);
        }

        let summary_path = dir.join(format!("{summary}.csv"));
        let mut w = csv::Writer::from_path(&summary_path)?;
        w.write_record([
            key_column,
            "n_ok",
            "n_failed",
            "consistency_mean",
            "consistency_lo",
            "consistency_hi",
            "alignment_mean",
            "alignment_lo",
            "alignment_hi",
            "config_fingerprint",
        ])?;
        for s in summaries {
            w.write_record([
                s.key.clone(),
                s.n_ok.to_string(),
                s.n_failed.to_string(),
                s.consistency.mean.to_string(),
                s.consistency.lo.to_string(),
                s.consistency.hi.to_string(),
                s.alignment.mean.to_string(),
                s.alignment.lo.to_string(),
                s.alignment.hi.to_string(),
                fp.clone(),
            ])?;
        }
        w.flush()?;

        let contrast_path = dir.join(format!("{name}_contrasts.csv"));
        let mut w = csv::Writer::from_path(&contrast_path)?;
        w.write_record(["metric", "minuend", "subtrahend", "diff_mean", "diff_lo", "diff_hi", "config_fingerprint"])?;
        for c in contrasts {
            w.write_record([
                c.metric.to_string(),
                c.minuend.clone(),
                c.subtrahend.clone(),
                c.diff.mean.to_string(),
                c.diff.lo.to_string(),
                c.diff.hi.to_string(),
                fp.clone(),
            ])?;
        }
        w.flush()?;

        let errors_path = dir.join(format!("{name}_errors.csv"));
        write_errors(&errors_path, cells, fp)?;
        files.extend([summary_path, contrast_path, errors_path]);
        Ok(files)
    }

    fn fused(&self, tau: usize, alpha_tau: f64, mode: AlphaMode) -> Method {
        Method::Fused(FusionConfig { tau, alpha_tau, mode })
    }

    pub fn sweep_alpha(&self) -> Result<SweepOutput> {
        if self.cfg.alphas.is_empty() {
            return Err(Error::Config("alpha grid is empty".into()));
        }
        let f = self.cfg.fusion;
        let grid: Vec<(String, Method)> =
            self.cfg.alphas.iter().map(|&a| (a.to_string(), self.fused(f.tau, a, self.cfg.alpha_sweep_mode))).collect();
        let keys: Vec<String> = grid.iter().map(|g| g.0.clone()).collect();
        let cells = self.run_cells(&grid);
        let summaries = self.summarize(&cells, &keys);
        let (first, last) = (&keys[0], &keys[keys.len() - 1]);
        let contrasts = vec![
            self.contrast(&cells, "frame_consistency", last, first),
            self.contrast(&cells, "textual_alignment", first, last),
        ];
        let files = self.write_outputs("sweep_alpha", "sweep_alpha", "alpha", true, &cells, &summaries, &contrasts)?;
        Ok(SweepOutput { cells, summaries, contrasts, files })
    }

    /// Varies τ at the configured α_τ and mode; adds a `baseline` row for
    /// the unfused video branch.
    pub fn sweep_tau(&self) -> Result<SweepOutput> {
        if self.cfg.taus.is_empty() {
            return Err(Error::Config("tau grid is empty".into()));
        }
        let f = self.cfg.fusion;
        let mut grid: Vec<(String, Method)> =
            self.cfg.taus.iter().map(|&t| (t.to_string(), self.fused(t, f.alpha_tau, f.mode))).collect();
        grid.push(("baseline".into(), Method::VideoOnly));
        let keys: Vec<String> = grid.iter().map(|g| g.0.clone()).collect();
        let cells = self.run_cells(&grid);
        let summaries = self.summarize(&cells, &keys);
        let contrasts = vec![self.contrast(&cells, "frame_consistency", &keys[0], "baseline")];
        let files = self.write_outputs("sweep_tau", "sweep_tau", "tau", true, &cells, &summaries, &contrasts)?;
        Ok(SweepOutput { cells, summaries, contrasts, files })
    }

    /// Fixed vs linear-to-one α at the configured τ and α_τ.
    pub fn ablate_schedule(&self) -> Result<SweepOutput> {
        let f = self.cfg.fusion;
        let grid = vec![
            ("fixed".to_string(), self.fused(f.tau, f.alpha_tau, AlphaMode::Fixed)),
            ("linear-to-one".to_string(), self.fused(f.tau, f.alpha_tau, AlphaMode::LinearToOne)),
        ];
        let keys: Vec<String> = grid.iter().map(|g| g.0.clone()).collect();
        let cells = self.run_cells(&grid);
        let summaries = self.summarize(&cells, &keys);
        let contrasts = vec![
            self.contrast(&cells, "frame_consistency", "linear-to-one", "fixed"),
            self.contrast(&cells, "textual_alignment", "linear-to-one", "fixed"),
        ];
        let files =
            self.write_outputs("ablate_schedule", "ablate_schedule", "mode", true, &cells, &summaries, &contrasts)?;
        Ok(SweepOutput { cells, summaries, contrasts, files })
    }

    /// Video-only, image-only and fused runs per seed. `baselines.csv` holds
    /// `method,seed,frame_consistency,textual_alignment,config_fingerprint`.
    pub fn baselines(&self) -> Result<SweepOutput> {
        let grid = vec![
            ("video-only".to_string(), Method::VideoOnly),
            ("image-only".to_string(), Method::ImageOnly),
            ("fused".to_string(), Method::Fused(self.cfg.fusion)),
        ];
        let keys: Vec<String> = grid.iter().map(|g| g.0.clone()).collect();
        let cells = self.run_cells(&grid);
        let summaries = self.summarize(&cells, &keys);
        let contrasts = vec![
            self.contrast(&cells, "frame_consistency", "video-only", "image-only"),
            self.contrast(&cells, "textual_alignment", "image-only", "video-only"),
        ];
        let dir = self.out_dir()?;
        let path = dir.join("baselines.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["method", "seed", "frame_consistency", "textual_alignment", "config_fingerprint"])?;
        for c in &cells {
            w.write_record([
                c.key.clone(),
                c.seed.to_string(),
                c.frame_consistency.to_string(),
                c.textual_alignment.to_string(),
                self.fingerprint.clone(),
            ])?;
        }
        w.flush()?;
        let mut files = vec![path];
        files.extend(self.write_outputs(
            "baselines",
            "baselines_summary",
            "method",
            false,
            &cells,
            &summaries,
            &contrasts,
        )?);
        Ok(SweepOutput { cells, summaries, contrasts, files })
    }

    /// Full edit per seed with the configured fusion; writes source and
    /// edited videos, the fusion trace, null-text results and `metrics.csv`.
    /// The first failure aborts after writing `error.json`.
    pub fn edit(&self) -> Result<Vec<PathBuf>> {
        let dir = self.out_dir()?.to_path_buf();
        let results: Vec<Result<(Prepared, super::pipeline::EditOutcome)>> = self.pool.install(|| {
            self.cfg
                .seeds
                .par_iter()
                .map(|&s| {
                    let p = prepare(&self.cfg, &self.world, &self.models, s)?;
                    let o = run_method(
                        &self.cfg,
                        &self.world,
                        &self.models,
                        &p,
                        Method::Fused(self.cfg.fusion),
                        &self.fingerprint,
                    )?;
                    Ok((p, o))
                })
                .collect()
        });
        let mut files = Vec::new();
        let metrics_path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&metrics_path)?;
        w.write_record([
            "method",
            "seed",
            "frame_consistency",
            "textual_alignment",
            "n_frames",
            "fused_steps",
            "config_fingerprint",
        ])?;
        for (res, &seed) in results.into_iter().zip(&self.cfg.seeds) {
            let (prep, out) = match res {
                Ok(v) => v,
                Err(e) => {
                    w.flush()?;
                    write_error_record(&dir.join("error.json"), "edit", Some(seed), &e)?;
                    return Err(e);
                }
            };
            let stem = dir.join(format!("edit_seed{seed}"));
            let p = |suffix: &str| PathBuf::from(format!("{}_{suffix}", stem.display()));
            write_video_csv(&prep.source_video, &p("source.csv"))?;
            write_video_csv(&out.decoded, &p("video.csv"))?;
            files.push(p("source.csv"));
            files.push(p("video.csv"));
            let trace = out.trace.as_ref().expect("fused edits carry a trace");
            trace.write_csv(&p("trace.csv"))?;
            files.push(p("trace.csv"));
            for (role, branch) in [("video", &prep.video), ("image", &prep.image)] {
                if let Some(nt) = &branch.null_text {
                    let s = p(&format!("null_text_{role}"));
                    nt.save(&s)?;
                    files.push(s.with_extension("json"));
                    files.push(s.with_extension("csv"));
                }
            }
            let m = &out.metrics;
            w.write_record([
                "fused".to_string(),
                seed.to_string(),
                m.frame_consistency.to_string(),
                m.textual_alignment.to_string(),
                m.n_frames.to_string(),
                trace.fused_count().to_string(),
                m.config_fingerprint.clone(),
            ])?;
        }
        w.flush()?;
        files.insert(0, metrics_path);
        Ok(files)
    }
}

fn write_errors(path: &Path, cells: &[CellResult], fp: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["key", "method", "seed", "error", "config_fingerprint"])?;
    for c in cells.iter().filter(|c| !c.is_ok()) {
        w.write_record([c.key.as_str(), c.method, &c.seed.to_string(), c.error.as_deref().unwrap_or_default(), fp])?;
    }
    w.flush()?;
    Ok(())
}

/// JSON error record: `{command, seed, validation, message}`.
pub fn write_error_record(path: &Path, command: &str, seed: Option<u64>, err: &Error) -> Result<()> {
    #[derive(Serialize)]
    struct Record<'a> {
        command: &'a str,
        seed: Option<u64>,
        validation: bool,
        message: String,
    }
    let rec = Record { command, seed, validation: err.is_validation(), message: err.to_string() };
    fs::write(path, serde_json::to_string_pretty(&rec)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub role: Role,
    pub initial_held_out: f64,
    pub held_out_loss: f64,
    /// Exact-posterior model's ε-MSE on the same held-out draws.
    pub analytic_held_out: f64,
}

/// Trains both roles on clips from the configured world and writes
/// `weights/{image,video}.{json,csv}`, `train_losses.csv` and
/// `train_summary.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, roles: &[Role]) -> Result<(Vec<TrainSummary>, Vec<PathBuf>)> {
    cfg.validate()?;
    let world = World::build(cfg)?;
    let data = world.training_set(cfg.train_clips_per_class, cfg.training.seed)?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(dir.join("weights"))?;
    let fp = cfg.fingerprint();
    let mut summaries = Vec::new();
    let mut files = Vec::new();
    let losses_path = dir.join("train_losses.csv");
    let mut lw = csv::Writer::from_path(&losses_path)?;
    lw.write_record(["role", "step", "loss", "config_fingerprint"])?;
    for &role in roles {
        let (model, report) = train_denoiser(role, &data, &world.schedule, &cfg.training)?;
        let name = match role {
            Role::Image => "image",
            Role::Video => "video",
        };
        let stem = dir.join("weights").join(name);
        model.save(&stem)?;
        files.push(stem.with_extension("json"));
        files.push(stem.with_extension("csv"));
        for (i, l) in report.losses.iter().enumerate() {
            lw.write_record([name, &i.to_string(), &l.to_string(), &fp])?;
        }
        let oracle = AnalyticGaussianDenoiser::new(&world.prior, &world.codec, world.schedule.clone(), role)?;
        let held = &data[..cfg.training.holdout_len(data.len()).max(1)];
        let analytic_held_out =
            evaluate_eps_mse(&oracle, held, &world.schedule, cfg.training.holdout_samples, cfg.training.eval_seed())?;
        summaries.push(TrainSummary {
            role,
            initial_held_out: report.initial_held_out,
            held_out_loss: report.held_out_loss,
            analytic_held_out,
        });
    }
    lw.flush()?;
    let summary_path = dir.join("train_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record(["role", "initial_held_out", "held_out_loss", "analytic_held_out", "config_fingerprint"])?;
    for s in &summaries {
        w.write_record([
            format!("{:?}", s.role).to_lowercase(),
            s.initial_held_out.to_string(),
            s.held_out_loss.to_string(),
            s.analytic_held_out.to_string(),
            fp.clone(),
        ])?;
    }
    w.flush()?;
    files.insert(0, summary_path);
    files.insert(0, losses_path);
    Ok((summaries, files))
}
