use std::ffi::{c_char, CString};
use std::ptr;

use vlfa::body::{forward_kinematics, BodyTemplate, PoseParams};
use vlfa::config::RunConfig;
use vlfa::diffusion::Mask;
use vlfa::eval::{mpjpe, pa_mpjpe};
use vlfa::pipeline::{generate_split, load_models, run_all, Split};
use vlfa_ffi::*;

fn last_error() -> String {
    let n = unsafe { vlfa_last_error(ptr::null_mut(), 0) };
    let mut buf = vec![0u8; n + 1];
    unsafe { vlfa_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    String::from_utf8(buf[..n].to_vec()).unwrap()
}

fn flat(p: &PoseParams) -> Vec<f32> {
    let mut v = p.theta.clone();
    v.extend(&p.beta);
    v.extend(p.trans);
    v
}

fn sample_pose() -> PoseParams {
    let mut rng = vlfa::rng::substream(0, "ffi", 0);
    vlfa::scene::sample_pose(&mut vlfa::scene::RngNoise(&mut rng))
}

#[test]
fn kinematics_projection_and_metrics_match_the_library() {
    let pose = sample_pose();
    let template = BodyTemplate::canonical();
    let mut body = ptr::null_mut();
    assert_eq!(unsafe { vlfa_body_new(&mut body) }, VlfaStatus::Ok);
    let mut joints = vec![0.0f32; VLFA_JOINTS_LEN];
    assert_eq!(unsafe { vlfa_forward_kinematics(body, flat(&pose).as_ptr(), joints.as_mut_ptr()) }, VlfaStatus::Ok);
    let want = forward_kinematics(&pose, &template).unwrap().joints;
    assert_eq!(joints, want.flat());

    let camera = vlfa_camera_default();
    let mut uv = vec![0.0f32; VLFA_KEYPOINTS_LEN];
    assert_eq!(unsafe { vlfa_project(&camera, joints.as_ptr(), uv.as_mut_ptr()) }, VlfaStatus::Ok);
    let want_uv: Vec<f32> = vlfa::camera::project(&Default::default(), &want).unwrap().into_iter().flatten().collect();
    assert_eq!(uv, want_uv);

    let shifted = want.translated([0.01, 0.0, 0.0]);
    let (mut a, mut b) = (0.0, 0.0);
    unsafe {
        assert_eq!(vlfa_mpjpe(shifted.flat().as_ptr(), joints.as_ptr(), &mut a), VlfaStatus::Ok);
        assert_eq!(vlfa_pa_mpjpe(shifted.flat().as_ptr(), joints.as_ptr(), true, &mut b), VlfaStatus::Ok);
    }
    assert_eq!(a, mpjpe(&shifted, &want).unwrap());
    assert_eq!(b, pa_mpjpe(&shifted, &want, true).unwrap().mm);
    assert!((a - 10.0).abs() < 1e-3 && b < 1e-3);
    unsafe { vlfa_body_free(body) };
}

#[test]
fn errors_report_codes_and_messages() {
    let mut out = 0.0;
    let joints = vec![0.0f32; VLFA_JOINTS_LEN];
    assert_eq!(unsafe { vlfa_mpjpe(ptr::null(), joints.as_ptr(), &mut out) }, VlfaStatus::NullPointer);
    assert_eq!(last_error(), "pred is null");

    let mut behind = vec![0.0f32; VLFA_JOINTS_LEN];
    behind[2] = -1.0;
    let mut uv = vec![0.0f32; VLFA_KEYPOINTS_LEN];
    let camera = vlfa_camera_default();
    assert_eq!(unsafe { vlfa_project(&camera, behind.as_ptr(), uv.as_mut_ptr()) }, VlfaStatus::BehindCamera);
    assert!(last_error().contains("behind camera"));

    let bad = VlfaCamera { focal: -1.0, ..camera };
    assert_eq!(unsafe { vlfa_project(&bad, joints.as_ptr(), uv.as_mut_ptr()) }, VlfaStatus::Config);

    let mut models = ptr::null_mut();
    let dir = CString::new("/nonexistent/vlfa").unwrap();
    assert_eq!(unsafe { vlfa_models_load(dir.as_ptr(), false, &mut models) }, VlfaStatus::MissingArtifacts);
    assert!(models.is_null());
    assert!(last_error().contains("regressor.ckpt"));

    // truncation keeps the terminator inside the buffer
    let mut small = [1 as c_char; 4];
    let n = unsafe { vlfa_last_error(small.as_mut_ptr(), small.len()) };
    assert!(n > 3 && small[3] == 0);
}

#[test]
fn refine_matches_the_library() {
    let mut cfg = RunConfig::default();
    cfg.data.regressor_scenes = 300;
    cfg.data.diffusion_scenes = 300;
    cfg.data.eval_scenes = 32;
    cfg.regressor.epochs = 2;
    cfg.vqvae.codebook_size = 16;
    cfg.vqvae.epochs = 2;
    cfg.align.epochs = 2;
    cfg.diffusion.epochs = 2;
    cfg.eval.seeds = vec![0];
    cfg.eval.masks = vec![Mask::All];
    let dir = tempfile::tempdir().unwrap();
    run_all(&cfg, dir.path()).unwrap();

    let mut models = ptr::null_mut();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { vlfa_models_load(path.as_ptr(), false, &mut models) }, VlfaStatus::Ok);
    let records = generate_split(&cfg, Split::Eval).unwrap();
    let (lib, _) = load_models(dir.path(), false).unwrap();
    let scenes = lib.contexts(&records).unwrap();
    let (want, _) = lib.refine(&scenes, &BodyTemplate::canonical(), Mask::NoText, 3).unwrap();

    let mask = CString::new("no-text").unwrap();
    for (r, w) in records.iter().zip(&want) {
        let json = CString::new(serde_json::to_string(r).unwrap()).unwrap();
        let mut pose = vec![0.0f32; VLFA_POSE_LEN];
        let mut flags = VlfaRefineFlags::default();
        let status = unsafe { vlfa_refine(models, json.as_ptr(), mask.as_ptr(), 3, pose.as_mut_ptr(), &mut flags) };
        assert_eq!(status, VlfaStatus::Ok, "{}", last_error());
        assert_eq!(pose, flat(w));
    }

    let json = CString::new(serde_json::to_string(&records[0]).unwrap()).unwrap();
    let bogus = CString::new("sideways").unwrap();
    let mut pose = vec![0.0f32; VLFA_POSE_LEN];
    let status = unsafe { vlfa_refine(models, json.as_ptr(), bogus.as_ptr(), 0, pose.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, VlfaStatus::Config);
    let garbage = CString::new("{not json").unwrap();
    let status = unsafe { vlfa_refine(models, garbage.as_ptr(), mask.as_ptr(), 0, pose.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(status, VlfaStatus::Format);
    unsafe { vlfa_models_free(models) };
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/vlfa.h")).unwrap();
    for name in [
        "vlfa_last_error",
        "vlfa_camera_default",
        "vlfa_body_new",
        "vlfa_body_free",
        "vlfa_forward_kinematics",
        "vlfa_project",
        "vlfa_mpjpe",
        "vlfa_pa_mpjpe",
        "vlfa_models_load",
        "vlfa_models_free",
        "vlfa_refine",
        "VLFA_STATUS_MISSING_ARTIFACTS",
        "typedef struct VlfaModels VlfaModels",
    ] {
        assert!(header.contains(name), "{name} missing from the header");
    }
}
