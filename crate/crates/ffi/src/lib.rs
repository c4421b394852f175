//! C ABI over the `vlfa` library.
//!
//! Every function returns a [`VlfaStatus`]; on failure the message is kept
//! per thread and can be copied out with [`vlfa_last_error`]. Handles are
//! opaque and must be released with their `_free` function. Arrays are
//! caller-owned `float` buffers of the documented length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vlfa::body::{forward_kinematics, BodyTemplate, JointSet, PoseParams, BETA_DIM, NUM_JOINTS, THETA_DIM};
use vlfa::camera::{project, Camera};
use vlfa::diffusion::{refine_batch, Mask, RefineOptions};
use vlfa::eval::{mpjpe, pa_mpjpe, Models};
use vlfa::pipeline::load_models;
use vlfa::scene::SceneRecord;
use vlfa::Error;

/// Floats in a pose: 6D rotations, shape, translation.
pub const VLFA_POSE_LEN: usize = 157;
/// Floats in a joint set.
pub const VLFA_JOINTS_LEN: usize = 72;
/// Floats in a set of projected keypoints.
pub const VLFA_KEYPOINTS_LEN: usize = 48;

const _: () = assert!(VLFA_POSE_LEN == THETA_DIM + BETA_DIM + 3);
const _: () = assert!(VLFA_JOINTS_LEN == 3 * NUM_JOINTS && VLFA_KEYPOINTS_LEN == 2 * NUM_JOINTS);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VlfaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    BehindCamera = 4,
    Degenerate = 5,
    NonFinite = 6,
    Io = 7,
    Format = 8,
    Integrity = 9,
    MissingArtifacts = 10,
    MixedHash = 11,
    Config = 12,
    Panic = 13,
}

/// Pinhole camera, pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct VlfaCamera {
    pub focal: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
}

/// Refinement outcome flags for one scene.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct VlfaRefineFlags {
    pub diverged: bool,
    pub behind_camera: u32,
    pub degenerate: u32,
    pub text_degenerate: u32,
}

/// Body template.
pub struct VlfaBody(BodyTemplate);

/// Trained regressor, codebook, text encoder and denoiser.
pub struct VlfaModels(Models);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn status_of(e: &Error) -> VlfaStatus {
    match e {
        Error::Shape { .. } => VlfaStatus::Shape,
        Error::BehindCamera { .. } => VlfaStatus::BehindCamera,
        Error::Degenerate { .. } | Error::RankDeficient => VlfaStatus::Degenerate,
        Error::NonFinite(_) | Error::Diverged(_) => VlfaStatus::NonFinite,
        Error::Io(_) => VlfaStatus::Io,
        Error::Format(_) | Error::Json(_) => VlfaStatus::Format,
        Error::Integrity(_) => VlfaStatus::Integrity,
        Error::MissingArtifacts(_) => VlfaStatus::MissingArtifacts,
        Error::MixedHash(_) => VlfaStatus::MixedHash,
        Error::Config(_) => VlfaStatus::Config,
        Error::Domain { .. } | Error::Contract(_) | Error::Vocabulary(_) => VlfaStatus::InvalidArgument,
    }
}

fn fail(status: VlfaStatus, msg: String) -> VlfaStatus {
    LAST_ERROR.with(|m| *m.borrow_mut() = msg);
    status
}

/// Runs `f`, recording errors and panics as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (VlfaStatus, String)>) -> VlfaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VlfaStatus::Ok,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            fail(VlfaStatus::Panic, msg.unwrap_or_else(|| "panic".into()))
        }
    }
}

fn lib(e: Error) -> (VlfaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (VlfaStatus, String) {
    (VlfaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(ptr: *const f32, len: usize, what: &str) -> Result<&'a [f32], (VlfaStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f32, len: usize, what: &str) -> Result<&'a mut [f32], (VlfaStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (VlfaStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| (VlfaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn pose_from(flat: &[f32]) -> PoseParams {
    PoseParams {
        theta: flat[..THETA_DIM].to_vec(),
        beta: flat[THETA_DIM..THETA_DIM + BETA_DIM].to_vec(),
        trans: [flat[VLFA_POSE_LEN - 3], flat[VLFA_POSE_LEN - 2], flat[VLFA_POSE_LEN - 1]],
    }
}

fn joints_from(flat: &[f32]) -> JointSet {
    JointSet { positions: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() }
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `len` bytes, into `buf`. Returns the full message length
/// in bytes, excluding the terminator; call with `buf = NULL` to size it.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vlfa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|m| {
        let msg = m.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// The library's default camera.
#[no_mangle]
pub extern "C" fn vlfa_camera_default() -> VlfaCamera {
    let c = Camera::default();
    VlfaCamera { focal: c.focal, cx: c.principal[0], cy: c.principal[1], width: c.image_size[0], height: c.image_size[1] }
}

/// The canonical body template.
///
/// # Safety
/// `out` must point to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vlfa_body_new(out: *mut *mut VlfaBody) -> VlfaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(VlfaBody(BodyTemplate::canonical())));
        Ok(())
    })
}

/// # Safety
/// `body` must be NULL or a handle from [`vlfa_body_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vlfa_body_free(body: *mut VlfaBody) {
    if !body.is_null() {
        drop(Box::from_raw(body));
    }
}

/// Joint positions of a pose: `pose` holds `VLFA_POSE_LEN` floats,
/// `joints_out` receives `VLFA_JOINTS_LEN`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vlfa_forward_kinematics(body: *const VlfaBody, pose: *const f32, joints_out: *mut f32) -> VlfaStatus {
    guard(|| {
        let body = body.as_ref().ok_or_else(|| null("body"))?;
        let pose = pose_from(slice(pose, VLFA_POSE_LEN, "pose")?);
        let out = slice_mut(joints_out, VLFA_JOINTS_LEN, "joints_out")?;
        let joints = forward_kinematics(&pose, &body.0).map_err(lib)?.joints;
        out.copy_from_slice(&joints.flat());
        Ok(())
    })
}

/// Pixel coordinates of camera-frame joints: `joints` holds
/// `VLFA_JOINTS_LEN` floats, `uv_out` receives `VLFA_KEYPOINTS_LEN`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vlfa_project(camera: *const VlfaCamera, joints: *const f32, uv_out: *mut f32) -> VlfaStatus {
    guard(|| {
        let c = camera.as_ref().ok_or_else(|| null("camera"))?;
        let camera = Camera { focal: c.focal, principal: [c.cx, c.cy], image_size: [c.width, c.height] };
        camera.validate().map_err(lib)?;
        let joints = joints_from(slice(joints, VLFA_JOINTS_LEN, "joints")?);
        let out = slice_mut(uv_out, VLFA_KEYPOINTS_LEN, "uv_out")?;
        let uv = project(&camera, &joints).map_err(lib)?;
        out.copy_from_slice(&uv.into_iter().flatten().collect::<Vec<_>>());
        Ok(())
    })
}

/// Mean per-joint position error in millimeters between two joint sets of
/// `VLFA_JOINTS_LEN` floats.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vlfa_mpjpe(pred: *const f32, gt: *const f32, mm_out: *mut f64) -> VlfaStatus {
    guard(|| {
        let pred = joints_from(slice(pred, VLFA_JOINTS_LEN, "pred")?);
        let gt = joints_from(slice(gt, VLFA_JOINTS_LEN, "gt")?);
        let out = mm_out.as_mut().ok_or_else(|| null("mm_out"))?;
        *out = mpjpe(&pred, &gt).map_err(lib)?;
        Ok(())
    })
}

/// MPJPE after rigid (`with_scale = false`) or similarity alignment.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vlfa_pa_mpjpe(pred: *const f32, gt: *const f32, with_scale: bool, mm_out: *mut f64) -> VlfaStatus {
    guard(|| {
        let pred = joints_from(slice(pred, VLFA_JOINTS_LEN, "pred")?);
        let gt = joints_from(slice(gt, VLFA_JOINTS_LEN, "gt")?);
        let out = mm_out.as_mut().ok_or_else(|| null("mm_out"))?;
        *out = pa_mpjpe(&pred, &gt, with_scale).map_err(lib)?.mm;
        Ok(())
    })
}

/// Loads the four checkpoints written by `vlfa run-all` from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must point to writable
/// storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vlfa_models_load(dir: *const c_char, allow_mixed: bool, out: *mut *mut VlfaModels) -> VlfaStatus {
    guard(|| {
        let dir = string(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (models, _) = load_models(Path::new(dir), allow_mixed).map_err(lib)?;
        *out = Box::into_raw(Box::new(VlfaModels(models)));
        Ok(())
    })
}

/// # Safety
/// `models` must be NULL or a handle from [`vlfa_models_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vlfa_models_free(models: *mut VlfaModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

/// Refines one scene. `scene_json` is one corpus line; `mask` is a condition
/// mask name such as `"all"` or `"no-text"`. Writes `VLFA_POSE_LEN` floats to
/// `pose_out` and, when `flags_out` is non-NULL, the refinement flags.
///
/// # Safety
/// Strings must be NUL-terminated; pointers must be valid for the stated
/// lengths.
#[no_mangle]
pub unsafe extern "C" fn vlfa_refine(
    models: *const VlfaModels,
    scene_json: *const c_char,
    mask: *const c_char,
    seed: u64,
    pose_out: *mut f32,
    flags_out: *mut VlfaRefineFlags,
) -> VlfaStatus {
    guard(|| {
        let models = &models.as_ref().ok_or_else(|| null("models"))?.0;
        let record: SceneRecord = serde_json::from_str(string(scene_json, "scene_json")?).map_err(|e| lib(e.into()))?;
        let mask: Mask = string(mask, "mask")?.parse().map_err(lib)?;
        let out = slice_mut(pose_out, VLFA_POSE_LEN, "pose_out")?;
        let template = BodyTemplate::canonical();
        let records = [record];
        let scenes = models.contexts(&records).map_err(lib)?;
        let refs: Vec<_> = scenes.iter().collect();
        let result = refine_batch(&refs, &models.denoiser, &models.denoiser.cfg, &models.guide(&template), &RefineOptions::new(mask, seed))
            .map_err(lib)?
            .remove(0);
        let p = &result.params;
        out[..THETA_DIM].copy_from_slice(&p.theta);
        out[THETA_DIM..THETA_DIM + BETA_DIM].copy_from_slice(&p.beta);
        out[THETA_DIM + BETA_DIM..].copy_from_slice(&p.trans);
        if let Some(f) = flags_out.as_mut() {
            let r = result.flags;
            *f = VlfaRefineFlags {
                diverged: r.diverged,
                behind_camera: r.behind_camera,
                degenerate: r.degenerate,
                text_degenerate: r.text_degenerate,
            };
        }
        Ok(())
    })
}
