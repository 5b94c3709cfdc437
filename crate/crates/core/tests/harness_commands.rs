use std::path::Path;

use fldm_core::denoisers::Role;
use fldm_core::fusion::AlphaMode;
use fldm_core::harness::{cmd_train, DenoiserChoice, ExperimentConfig, Session};

fn small(dir: &Path, seeds: Vec<u64>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::standard();
    cfg.seeds = seeds;
    cfg.output_dir = dir.to_path_buf();
    cfg.bootstrap_resamples = 200;
    cfg
}

fn read(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn single_alpha_single_seed_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![3]);
    cfg.alphas = vec![0.5];
    let out = Session::new(cfg, Some(1)).unwrap().sweep_alpha().unwrap();
    assert_eq!(out.cells.len(), 1);
    let (header, rows) = read(&dir.path().join("sweep_alpha_cells.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][col(&header, "alpha")], "0.5");
    assert_eq!(rows[0][col(&header, "seed")], "3");
}

#[test]
fn tau_sweep_counts_fused_steps_and_matches_baseline_at_t() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), vec![0, 1]);
    let steps = cfg.schedule.steps;
    let taus = cfg.taus.clone();
    let out = Session::new(cfg, None).unwrap().sweep_tau().unwrap();
    for c in out.cells.iter().filter(|c| c.key != "baseline") {
        let tau: usize = c.key.parse().unwrap();
        assert_eq!(c.fused_steps, Some(steps - tau));
    }
    assert!(taus.contains(&steps));
    for seed in [0, 1] {
        let at_t = out.cells.iter().find(|c| c.key == steps.to_string() && c.seed == seed).unwrap();
        let base = out.cells.iter().find(|c| c.key == "baseline" && c.seed == seed).unwrap();
        assert_eq!(at_t.frame_consistency, base.frame_consistency);
        assert_eq!(at_t.textual_alignment, base.textual_alignment);
    }
    for c in out.cells.iter().filter(|c| c.fused_steps.is_some()) {
        let fused = c.fused_steps.unwrap() > 0;
        assert_eq!(c.first_divergence.is_some_and(f64::is_finite), fused, "tau {}", c.key);
    }
}

#[test]
fn schedule_ablation_final_weights_and_degenerate_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), vec![0, 1]);
    let (steps, f) = (cfg.schedule.steps, cfg.fusion);
    let out = Session::new(cfg.clone(), None).unwrap().ablate_schedule().unwrap();
    for c in &out.cells {
        let w = c.final_image_weight.unwrap();
        let want = match c.key.as_str() {
            "fixed" => 1.0 - f.alpha_tau,
            _ => (1.0 - f.alpha_tau) / (steps - f.tau) as f64,
        };
        assert!((w - want).abs() < 1e-12, "{}: {w} vs {want}", c.key);
    }

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![0, 1]);
    cfg.fusion.alpha_tau = 1.0;
    let out = Session::new(cfg, None).unwrap().ablate_schedule().unwrap();
    for seed in [0, 1] {
        let get = |k: &str| out.cells.iter().find(|c| c.key == k && c.seed == seed).unwrap().clone();
        let (a, b) = (get("fixed"), get("linear-to-one"));
        assert_eq!((a.frame_consistency, a.textual_alignment), (b.frame_consistency, b.textual_alignment));
    }
}

#[test]
fn baselines_schema_and_video_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![0, 1, 2]);
    cfg.fusion.alpha_tau = 1.0;
    cfg.fusion.mode = AlphaMode::LinearToOne;
    let fp = cfg.fingerprint();
    let out = Session::new(cfg, None).unwrap().baselines().unwrap();
    let (header, rows) = read(&dir.path().join("baselines.csv"));
    assert_eq!(header, ["method", "seed", "frame_consistency", "textual_alignment", "config_fingerprint"]);
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[4] == fp));
    for seed in ["0", "1", "2"] {
        let get = |m: &str| rows.iter().find(|r| r[0] == m && r[1] == seed).unwrap().clone();
        assert_eq!(get("fused")[2..4], get("video-only")[2..4]);
    }
    assert!(out.cells.iter().all(|c| c.is_ok()));
}

#[test]
fn every_output_row_carries_fingerprint_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), vec![5, 6]);
    let fp = cfg.fingerprint();
    let s = Session::new(cfg, None).unwrap();
    s.sweep_alpha().unwrap();
    s.edit().unwrap();
    for name in ["sweep_alpha_cells.csv", "metrics.csv"] {
        let (header, rows) = read(&dir.path().join(name));
        let (fc, sc) = (col(&header, "config_fingerprint"), col(&header, "seed"));
        assert!(!rows.is_empty());
        for r in rows {
            assert_eq!(r[fc], fp);
            assert!(r[sc] == "5" || r[sc] == "6");
        }
    }
    for suffix in ["source", "video", "trace"] {
        assert!(dir.path().join(format!("edit_seed5_{suffix}.csv")).exists());
    }
}

#[test]
fn failed_cells_stay_as_error_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![0, 1]);
    // trained networks have no image-condition channel, so dual guidance
    // fails in every cell that uses the image branch
    cfg.image_denoiser = DenoiserChoice::trained(None);
    cfg.guidance.image_scale = Some(1.5);
    cfg.training.steps = 50;
    cfg.train_clips_per_class = 8;
    cfg.null_text.inner_steps = 1;
    let out = Session::new(cfg, Some(1)).unwrap().baselines().unwrap();
    assert_eq!(out.cells.len(), 6);
    for c in &out.cells {
        assert_eq!(c.is_ok(), c.key == "video-only", "{}: {:?}", c.key, c.error);
        if !c.is_ok() {
            assert!(c.frame_consistency.is_nan());
        }
    }
    let (_, rows) = read(&dir.path().join("baselines.csv"));
    assert_eq!(rows.len(), 6);
    let (_, errors) = read(&dir.path().join("baselines_errors.csv"));
    assert_eq!(errors.len(), 4);
    let failed = out.summaries.iter().find(|s| s.key == "image-only").unwrap();
    assert_eq!((failed.n_ok, failed.n_failed), (0, 2));
}

#[test]
fn edit_failure_writes_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![0]);
    cfg.image_denoiser = DenoiserChoice::trained(None);
    cfg.guidance.image_scale = Some(1.5);
    cfg.training.steps = 20;
    cfg.train_clips_per_class = 4;
    cfg.null_text.inner_steps = 1;
    let err = Session::new(cfg, Some(1)).unwrap().edit().unwrap_err();
    assert!(!err.is_validation());
    let rec: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("error.json")).unwrap()).unwrap();
    assert_eq!(rec["command"], "edit");
    assert_eq!(rec["seed"], 0);
    assert_eq!(rec["validation"], false);
}

#[test]
fn train_writes_weights_that_load_into_a_session() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![0]);
    cfg.training.steps = 200;
    cfg.training.holdout_samples = 256;
    cfg.train_clips_per_class = 16;
    let (summaries, files) = cmd_train(&cfg, &[Role::Image, Role::Video]).unwrap();
    assert_eq!(summaries.len(), 2);
    assert!(files.iter().all(|f| f.exists()));
    for s in &summaries {
        assert!(s.held_out_loss < s.initial_held_out, "{s:?}");
        assert!(s.analytic_held_out > 0.0);
    }
    let (header, rows) = read(&dir.path().join("train_losses.csv"));
    assert_eq!(header, ["role", "step", "loss", "config_fingerprint"]);
    assert_eq!(rows.len(), 400);

    let mut edit_cfg = cfg.clone();
    edit_cfg.output_dir = dir.path().join("edit");
    edit_cfg.image_denoiser = DenoiserChoice::trained(Some(dir.path().join("weights/image")));
    edit_cfg.video_denoiser = DenoiserChoice::trained(Some(dir.path().join("weights/video")));
    edit_cfg.null_text.inner_steps = 2;
    let s = Session::new(edit_cfg.clone(), Some(1)).unwrap();
    assert!(s.models.reports.is_empty(), "weights were loaded, not retrained");
    let files = s.edit().unwrap();
    assert!(files.iter().any(|f| f.to_string_lossy().ends_with("null_text_video.json")));
    assert!(files.iter().any(|f| f.to_string_lossy().ends_with("null_text_image.csv")));

    // weights of the wrong role are refused
    edit_cfg.video_denoiser = DenoiserChoice::trained(Some(dir.path().join("weights/image")));
    assert!(Session::new(edit_cfg, None).is_err());
}

#[test]
fn endpoint_alpha_grid_has_separated_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::standard();
    cfg.output_dir = dir.path().to_path_buf();
    cfg.alphas = vec![0.0, 1.0];
    let out = Session::new(cfg, None).unwrap().sweep_alpha().unwrap();
    let (c0, c1) = (out.summaries[0].consistency, out.summaries[1].consistency);
    assert_eq!(out.summaries[0].n_ok, 20);
    assert!(c1.lo > c0.hi, "{c0:?} vs {c1:?}");
}
