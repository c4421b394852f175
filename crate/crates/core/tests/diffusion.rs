mod common;

use rand::Rng;
use rand_distr::StandardNormal;

use vlfa::body::{forward_kinematics, BodyTemplate, PoseParams, THETA_DIM};
use vlfa::camera::reprojection_loss;
use vlfa::diffusion::*;
use vlfa::rng::substream;
use vlfa::scene::{generate_scene, NoiseConfig, FEATURE_DIM};
use vlfa::vqvae::PoseVqvae;

use common::fixture;

const KEYP: std::ops::Range<usize> = FEATURE_DIM..FEATURE_DIM + KEYP_DIM;
const TEXT: std::ops::Range<usize> = FEATURE_DIM + KEYP_DIM..COND_DIM;

fn segment_ranges() -> [std::ops::Range<usize>; 3] {
    [0..FEATURE_DIM, KEYP, TEXT]
}

fn reproj(params: &PoseParams, scene: &SceneCtx, template: &BodyTemplate) -> f32 {
    let joints = forward_kinematics(params, template).unwrap().joints;
    reprojection_loss(&scene.record.camera, &joints, &scene.record.obs_keypoints).unwrap_or(f32::INFINITY)
}

#[test]
fn zero_noise_stub_rescales_the_start_sample() {
    let f = fixture();
    let scenes = f.models.contexts(&f.eval[..8]).unwrap();
    let refs: Vec<&SceneCtx> = scenes.iter().collect();
    let cfg = DiffusionConfig { reverse_noise: 0.0, ..f.models.denoiser.cfg.clone() };
    let schedule = cfg.schedule().unwrap();
    let gain: f64 = schedule.alphas.iter().map(|a| a.powf(-0.5)).product();
    let opts = RefineOptions { keep_trajectory: true, ..RefineOptions::new(Mask::All, 5) };
    let out = refine_batch(&refs, &ZeroEps, &cfg, &f.models.guide(&f.template), &opts).unwrap();
    for (r, s) in out.iter().zip(&scenes) {
        let traj = r.trajectory.as_ref().unwrap();
        assert_eq!(traj.len(), cfg.steps + 1);
        let (start, end) = (&traj[0], traj.last().unwrap());
        for (a, b) in start.iter().zip(end) {
            let want = *a as f64 * gain;
            assert!((*b as f64 - want).abs() <= 1e-4 * want.abs().max(1.0), "{b} vs {want}");
        }
        if !r.flags.any() {
            let mut flags = RefineFlags::default();
            assert_eq!(r.params, decode_residual(&s.init, end, &cfg, &mut flags));
        }
    }
}

#[test]
fn masked_segments_are_zero_and_inert() {
    let f = fixture();
    let scenes = f.models.contexts(&f.eval[..16]).unwrap();
    let refs: Vec<&SceneCtx> = scenes.iter().collect();
    let guide = f.models.guide(&f.template);
    let mut rng = substream(3, "mask-test", 0);
    let cfg = &f.models.denoiser.cfg;
    let n: Vec<Vec<f32>> = (0..refs.len()).map(|_| (0..X_DIM).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let mut flags = vec![RefineFlags::default(); refs.len()];
    let decoded: Vec<PoseParams> =
        scenes.iter().zip(&n).zip(flags.iter_mut()).map(|((s, x), fl)| decode_residual(&s.init, x, cfg, fl)).collect();
    let ts = vec![40; refs.len()];
    for mask in Mask::ALL {
        let (c, _) = build_conditions(&refs, &decoded, mask, &guide, &mut flags).unwrap();
        let input = f.models.denoiser.inputs(&n, &c, &ts).unwrap();
        let base = f.models.denoiser.predict_eps(&n, &c, &ts).unwrap();
        // scramble the first-layer weights reading the masked segments
        let mut perturbed = f.models.denoiser.clone();
        let w = &mut perturbed.net.layers[0].weight;
        let cols = w.cols();
        for (seg, on) in segment_ranges().into_iter().zip(mask.segments()) {
            for r in 0..c.rows() {
                let row = &c.row_slice(r)[seg.clone()];
                let net_row = &input.row_slice(r)[X_DIM + seg.start..X_DIM + seg.end];
                if on {
                    assert!(row.iter().any(|v| *v != 0.0), "{mask}: enabled segment {seg:?} is all zero");
                } else {
                    assert!(row.iter().all(|v| *v == 0.0), "{mask}: masked segment {seg:?} leaks");
                    assert!(net_row.iter().all(|v| *v == 0.0));
                }
            }
            if !on {
                let data = w.data_mut();
                for i in X_DIM + seg.start..X_DIM + seg.end {
                    for j in 0..cols {
                        data[i * cols + j] += 0.5;
                    }
                }
            }
        }
        assert_eq!(perturbed.predict_eps(&n, &c, &ts).unwrap(), base, "{mask}");
    }
}

#[test]
fn keypoint_gradient_vanishes_at_ground_truth() {
    let template = BodyTemplate::canonical();
    let clean = NoiseConfig { sigma_px: 0.0, p_occ: 0.0 };
    let vq = PoseVqvae::new(16, 0.25, &mut substream(0, "vq", 0));
    let guide = Guide { template: &template, vq: &vq, cosine: Default::default() };
    for id in 0..20 {
        let record = generate_scene(11, id, &template, &Default::default(), &clean).unwrap();
        let scene = SceneCtx { record: &record, init: record.gt_params.clone(), z_text: vec![1.0; vlfa::vqvae::LATENT_DIM] };
        let mut off = record.gt_params.clone();
        off.trans[0] += 0.05;
        let mut flags = vec![RefineFlags::default(); 2];
        let (c, loss) = build_conditions(&[&scene, &scene], &[record.gt_params.clone(), off], Mask::Keypoints, &guide, &mut flags).unwrap();
        let norm = |r: usize| c.row_slice(r)[KEYP].iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(loss[0] < 1e-4, "reprojection at gt {}", loss[0]);
        assert!(norm(0) < 1e-4 * norm(1), "{} vs {}", norm(0), norm(1));
    }
}

#[test]
fn condition_changes_along_the_trajectory() {
    let f = fixture();
    let scenes = f.models.contexts(&f.eval[..4]).unwrap();
    let refs: Vec<&SceneCtx> = scenes.iter().collect();
    let cfg = &f.models.denoiser.cfg;
    let guide = f.models.guide(&f.template);
    let opts = RefineOptions { keep_trajectory: true, ..RefineOptions::new(Mask::All, 1) };
    let out = refine_batch(&refs, &f.models.denoiser, cfg, &guide, &opts).unwrap();
    for (r, s) in out.iter().zip(&refs) {
        let traj = r.trajectory.as_ref().unwrap();
        for k in [10, 50, 90] {
            let mut flags = vec![RefineFlags::default()];
            let a = decode_residual(&s.init, &traj[k], cfg, &mut flags[0]);
            let b = decode_residual(&s.init, &traj[k + 1], cfg, &mut flags[0]);
            let (ca, _) = build_conditions(&[*s], &[a], Mask::All, &guide, &mut flags).unwrap();
            let (cb, _) = build_conditions(&[*s], &[b], Mask::All, &guide, &mut flags).unwrap();
            assert_eq!(ca.row_slice(0)[..FEATURE_DIM], cb.row_slice(0)[..FEATURE_DIM]);
            assert_ne!(ca.row_slice(0)[KEYP], cb.row_slice(0)[KEYP]);
            assert_ne!(ca.row_slice(0)[TEXT], cb.row_slice(0)[TEXT]);
        }
    }
}

#[test]
fn shape_is_never_refined() {
    let f = fixture();
    let scenes = f.models.contexts(&f.eval[..32]).unwrap();
    for mask in [Mask::All, Mask::Keypoints, Mask::Image] {
        let (preds, _) = f.models.refine(&scenes, &f.template, mask, 0).unwrap();
        for (p, s) in preds.iter().zip(&scenes) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.beta), bits(&s.init.beta));
        }
    }
}

#[test]
fn refinement_is_deterministic_and_batch_independent() {
    let f = fixture();
    let scenes = f.models.contexts(&f.eval[..12]).unwrap();
    let (a, _) = f.models.refine(&scenes, &f.template, Mask::All, 9).unwrap();
    let (b, _) = f.models.refine(&scenes, &f.template, Mask::All, 9).unwrap();
    assert_eq!(a, b);
    for (i, s) in scenes.iter().enumerate().step_by(4) {
        let (one, _) = f.models.refine(std::slice::from_ref(s), &f.template, Mask::All, 9).unwrap();
        assert_eq!(one[0], a[i]);
    }
    let (c, _) = f.models.refine(&scenes, &f.template, Mask::All, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn reverse_chain_moves_noised_residuals_back() {
    let f = fixture();
    let cfg = &f.models.denoiser.cfg;
    let schedule = cfg.schedule().unwrap();
    let scenes = f.models.contexts(&f.eval).unwrap();
    let refs: Vec<&SceneCtx> = scenes.iter().collect();
    let guide = f.models.guide(&f.template);
    let mut rng = substream(4, "consistency", 0);
    let dist = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt() as f64;
    for t in [10, 30, 60] {
        let r0: Vec<Vec<f32>> = refs.iter().map(|s| encode_residual(&s.init, &s.record.gt_params, cfg)).collect();
        let xt: Vec<Vec<f32>> = r0
            .iter()
            .map(|r| {
                let eps: Vec<f32> = (0..X_DIM).map(|_| rng.sample(StandardNormal)).collect();
                schedule.q_sample(r, &eps, t)
            })
            .collect();
        let opts = RefineOptions { keep_trajectory: true, start: Some((t, xt.clone())), ..RefineOptions::new(Mask::All, 0) };
        let out = refine_batch(&refs, &f.models.denoiser, cfg, &guide, &opts).unwrap();
        let (mut before, mut after) = (0.0, 0.0);
        for ((r, x), o) in r0.iter().zip(&xt).zip(&out) {
            before += dist(x, r);
            after += dist(o.trajectory.as_ref().unwrap().last().unwrap(), r);
        }
        assert!(refs.len() >= 200);
        assert!(after < before, "t={t}: {after} >= {before}");
    }
}

#[test]
fn keypoint_guidance_lowers_reprojection() {
    let f = fixture();
    let scenes = f.models.contexts(&f.eval).unwrap();
    for mask in [Mask::All, Mask::NoText] {
        let (preds, _) = f.models.refine(&scenes, &f.template, mask, 0).unwrap();
        let (mut init, mut refined) = (0.0f64, 0.0f64);
        for (p, s) in preds.iter().zip(&scenes) {
            let (a, b) = (reproj(&s.init, s, &f.template), reproj(p, s, &f.template));
            if a.is_finite() && b.is_finite() {
                init += a as f64;
                refined += b as f64;
            }
        }
        assert!(refined <= init, "{mask}: {refined} > {init}");
    }
}

#[test]
fn training_is_finite_decreasing_and_seeded() {
    let f = fixture();
    let scenes = f.models.contexts(&f.train[..400]).unwrap();
    let guide = f.models.guide(&f.template);
    let cfg = DiffusionConfig { epochs: 4, batch: 32, ..f.cfg.diffusion.clone() };
    let (a, report) = train_diffusion(&scenes, &cfg, &guide, 17).unwrap();
    assert_eq!(report.losses.len(), 4);
    assert!(report.losses.iter().all(|l| l.is_finite()));
    assert!(report.losses[3] < report.losses[0], "{:?}", report.losses);
    let (b, _) = train_diffusion(&scenes, &cfg, &guide, 17).unwrap();
    assert_eq!(a, b);
    assert!(a.is_finite());
    let one = DiffusionConfig { epochs: 1, ..cfg };
    let (_, report) = train_diffusion(&scenes, &one, &guide, 18).unwrap();
    assert!(report.losses[0].is_finite());
}

#[test]
fn gaussian_harness_recovers_the_target_mean() {
    for (mean, seed) in [(0.3f32, 0u64), (-0.2, 1)] {
        let r = gaussian_harness(mean, 0.1, DiffusionConfig::default().sigma, 500, seed).unwrap();
        assert!((r.sample_mean - mean as f64).abs() < 0.05, "target {mean}, got {}", r.sample_mean);
    }
}

#[test]
fn theta_residual_is_scaled_by_sigma() {
    let cfg = DiffusionConfig::default();
    let init = PoseParams::rest([0.0, 0.0, 4.0]);
    let mut target = init.clone();
    target.theta[THETA_DIM - 1] += cfg.sigma;
    target.trans[1] += 1.0 / cfg.trans_scale * cfg.sigma;
    let n = encode_residual(&init, &target, &cfg);
    assert!((n[THETA_DIM - 1] - 1.0).abs() < 1e-6);
    assert!((n[THETA_DIM + 1] - 1.0).abs() < 1e-6);
}
