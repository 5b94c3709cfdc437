use fldm_core::ddim::{ddim_sample_loop, GuidanceConfig};
use fldm_core::denoisers::{Denoiser, Role, TrainedDenoiser};
use fldm_core::fusion::{fldm_edit, AlphaMode, Branch, FusionConfig, FusionRun};
use fldm_core::rng;
use fldm_core::{NoiseSchedule, VideoLatent};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

struct Pair {
    schedule: NoiseSchedule,
    video: TrainedDenoiser,
    image: TrainedDenoiser,
    zv: VideoLatent,
    zi: VideoLatent,
}

fn pair(steps: usize, seed: u64) -> Pair {
    let schedule = NoiseSchedule::linear(steps, 1e-3, 0.08).unwrap();
    let labels = vec!["a".to_string(), "b".to_string()];
    let video = TrainedDenoiser::init(Role::Video, 2, 3, 8, &labels, &schedule, seed).unwrap();
    let image = TrainedDenoiser::init(Role::Image, 2, 3, 8, &labels, &schedule, seed + 1).unwrap();
    let mut r = rng::stream(seed + 2);
    let mut lat = || VideoLatent::new(Array2::from_shape_fn((3, 2), |_| r.sample(StandardNormal))).unwrap();
    let (zv, zi) = (lat(), lat());
    Pair { schedule, video, image, zv, zi }
}

fn branch<'a>(model: &'a dyn Denoiser, start: &VideoLatent, scale: f64) -> Branch<'a> {
    Branch {
        model,
        start: start.clone(),
        cond: model.class_embedding("b").unwrap(),
        guidance: GuidanceConfig::text(scale),
    }
}

impl Pair {
    fn run(&self, fusion: FusionConfig) -> FusionRun<'_, '_> {
        FusionRun::new(branch(&self.video, &self.zv, 2.0), branch(&self.image, &self.zi, 2.0), &self.schedule, fusion)
            .unwrap()
    }
}

fn mode_strategy() -> impl Strategy<Value = AlphaMode> {
    prop_oneof![Just(AlphaMode::Fixed), Just(AlphaMode::LinearToOne)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn fused_steps_overwrite_both_branches_with_a_convex_blend(
        steps in 1usize..12,
        tau_frac in 0.0f64..=1.0,
        alpha_tau in 0.0f64..=1.0,
        mode in mode_strategy(),
        seed in 0u64..1000,
    ) {
        let tau = ((steps as f64) * tau_frac).round() as usize;
        let p = pair(steps, seed);
        let mut run = p.run(FusionConfig { tau, alpha_tau, mode });
        let mut fused = 0;
        while !run.is_done() {
            let rec = run.step().unwrap();
            prop_assert_eq!(rec.row.fused, rec.row.t + tau <= steps);
            if rec.row.fused {
                fused += 1;
                prop_assert_eq!(run.video_latent(), run.image_latent());
                let z = run.video_latent().values();
                for ((v, i), f) in rec.video_pre.values().iter().zip(rec.image_pre.values()).zip(z) {
                    let (lo, hi) = (v.min(*i), v.max(*i));
                    let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                    prop_assert!(*f >= lo - slack && *f <= hi + slack);
                }
            } else {
                prop_assert!(rec.row.alpha_used.is_none());
            }
        }
        prop_assert_eq!(fused, steps - tau);
    }

    #[test]
    fn linear_alpha_rises_from_alpha_tau_to_one(
        steps in 2usize..40,
        tau_frac in 0.0f64..0.95,
        alpha_tau in 0.0f64..0.999,
        seed in 0u64..1000,
    ) {
        let tau = (((steps as f64) * tau_frac) as usize).min(steps - 1);
        let p = pair(steps, seed);
        let (_, trace) = p.run(FusionConfig { tau, alpha_tau, mode: AlphaMode::LinearToOne }).finish().unwrap();
        let used: Vec<f64> = trace.rows.iter().filter_map(|r| r.alpha_used).collect();
        prop_assert_eq!(used.len(), steps - tau);
        prop_assert_eq!(used[0], alpha_tau);
        prop_assert!(used.windows(2).all(|w| w[1] > w[0]));
        let last_expected = 1.0 - (1.0 - alpha_tau) / (steps - tau) as f64;
        prop_assert!((used[used.len() - 1] - last_expected).abs() <= 1e-12);
        prop_assert!((trace.final_alpha - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn fixed_alpha_never_moves(steps in 1usize..20, alpha_tau in 0.0f64..=1.0, seed in 0u64..1000) {
        let p = pair(steps, seed);
        let (_, trace) = p.run(FusionConfig { tau: 0, alpha_tau, mode: AlphaMode::Fixed }).finish().unwrap();
        prop_assert!(trace.rows.iter().all(|r| r.alpha_used == Some(alpha_tau)));
        prop_assert_eq!(trace.final_alpha, alpha_tau);
    }

    #[test]
    fn degenerate_settings_reduce_to_a_single_branch(steps in 1usize..12, tau_frac in 0.0f64..=1.0, seed in 0u64..1000) {
        let tau = ((steps as f64) * tau_frac).round() as usize;
        let p = pair(steps, seed);
        let g = GuidanceConfig::text(2.0);
        let (video_only, _) = ddim_sample_loop(&p.video, &p.zv, &p.video.class_embedding("b").unwrap(), &g, &p.schedule).unwrap();
        let (image_only, _) = ddim_sample_loop(&p.image, &p.zi, &p.image.class_embedding("b").unwrap(), &g, &p.schedule).unwrap();
        let (a1, _) = p.run(FusionConfig { tau, alpha_tau: 1.0, mode: AlphaMode::LinearToOne }).finish().unwrap();
        let (a1_fixed, _) = p.run(FusionConfig { tau, alpha_tau: 1.0, mode: AlphaMode::Fixed }).finish().unwrap();
        let (a0, _) = p.run(FusionConfig { tau: 0, alpha_tau: 0.0, mode: AlphaMode::Fixed }).finish().unwrap();
        let (none, trace) = p.run(FusionConfig { tau: steps, alpha_tau: 0.3, mode: AlphaMode::LinearToOne }).finish().unwrap();
        prop_assert_eq!(&a1, &video_only);
        prop_assert_eq!(&a1_fixed, &a1);
        prop_assert_eq!(&a0, &image_only);
        prop_assert_eq!(&none, &video_only);
        prop_assert_eq!(trace.fused_count(), 0);
        prop_assert_eq!(trace.final_alpha, 0.3);
    }
}

#[test]
fn final_image_weight_by_mode() {
    let (steps, tau, alpha_tau) = (20, 8, 0.4);
    let p = pair(steps, 5);
    let last_weight = |mode| {
        let (_, trace) = p.run(FusionConfig { tau, alpha_tau, mode }).finish().unwrap();
        1.0 - trace.rows.last().unwrap().alpha_used.unwrap()
    };
    assert!((last_weight(AlphaMode::Fixed) - (1.0 - alpha_tau)).abs() < 1e-12);
    let linear = (1.0 - alpha_tau) / (steps - tau) as f64;
    assert!((last_weight(AlphaMode::LinearToOne) - linear).abs() < 1e-12);
}

#[test]
fn stepping_matches_the_full_loop_and_stops() {
    let p = pair(9, 11);
    let fusion = FusionConfig { tau: 3, alpha_tau: 0.25, mode: AlphaMode::LinearToOne };
    let (whole, trace) =
        fldm_edit(branch(&p.video, &p.zv, 2.0), branch(&p.image, &p.zi, 2.0), &p.schedule, fusion).unwrap();
    let mut run = p.run(fusion);
    let mut rows = Vec::new();
    while !run.is_done() {
        rows.push(run.step().unwrap().row);
    }
    assert_eq!(run.output(), &whole);
    assert_eq!(rows, trace.rows);
    assert!(run.step().is_err());
    assert_eq!(trace.rows.iter().map(|r| r.t).collect::<Vec<_>>(), (1..=9).rev().collect::<Vec<_>>());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let p = pair(5, 1);
    let bad = VideoLatent::zeros(4, 2);
    let fusion = FusionConfig { tau: 1, alpha_tau: 0.5, mode: AlphaMode::Fixed };
    assert!(FusionRun::new(branch(&p.video, &p.zv, 2.0), branch(&p.image, &bad, 2.0), &p.schedule, fusion).is_err());
    let too_late = FusionConfig { tau: 6, ..fusion };
    assert!(FusionRun::new(branch(&p.video, &p.zv, 2.0), branch(&p.image, &p.zi, 2.0), &p.schedule, too_late).is_err());
}
