//! Synthetic scenes: sampled poses, noisy 2D detections, stand-in image
//! features, and rule-based part descriptions.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::*;
use crate::camera::{project, Camera, Keypoints2D};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const FEATURE_DIM: usize = 64;
pub const MAX_TOKENS: usize = 12;
const MAX_ATTEMPTS: usize = 64;

/// Source of the random offsets used by [`sample_pose`]. Every draw is an
/// offset from a nominal value, so an all-zero source yields the nominal pose.
pub trait PoseNoise {
    /// A draw from `U(lo, hi)`; callers always pass `lo <= 0 <= hi`.
    fn uniform(&mut self, lo: f32, hi: f32) -> f32;
    fn gaussian(&mut self, std: f32) -> f32;
}

/// Returns zero for every draw.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl PoseNoise for ZeroNoise {
    fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        0.0f32.clamp(lo, hi)
    }

    fn gaussian(&mut self, _std: f32) -> f32 {
        0.0
    }
}

pub struct RngNoise<'a, R: Rng + ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> PoseNoise for RngNoise<'_, R> {
    fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        if lo >= hi {
            return lo;
        }
        self.0.random_range(lo..hi)
    }

    fn gaussian(&mut self, std: f32) -> f32 {
        Normal::new(0.0, std).expect("valid std").sample(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Limit {
    Root,
    Spine,
    Neck,
    Collar,
    Limb,
    Knee,
    Elbow,
    Distal,
}

/// `[flex, twist, abduct]` ranges in degrees and the per-axis jitter.
fn limits(kind: Limit) -> ([(f32, f32); 3], [f32; 3]) {
    match kind {
        Limit::Root => ([(-10.0, 10.0), (-180.0, 180.0), (-10.0, 10.0)], [8.0, 0.0, 8.0]),
        Limit::Spine => ([(-30.0, 30.0); 3], [8.0, 8.0, 6.0]),
        Limit::Neck => ([(-30.0, 30.0); 3], [12.0, 22.0, 10.0]),
        Limit::Collar => ([(-10.0, 10.0); 3], [5.0, 5.0, 5.0]),
        Limit::Limb => ([(-120.0, 120.0), (-45.0, 45.0), (-45.0, 45.0)], [20.0, 15.0, 15.0]),
        Limit::Knee => ([(0.0, 120.0), (0.0, 0.0), (0.0, 0.0)], [15.0, 0.0, 0.0]),
        Limit::Elbow => ([(-120.0, 0.0), (0.0, 0.0), (0.0, 0.0)], [15.0, 0.0, 0.0]),
        Limit::Distal => ([(-20.0, 20.0), (-10.0, 10.0), (-10.0, 10.0)], [10.0, 8.0, 8.0]),
    }
}

fn limit_of(j: usize) -> Limit {
    match j {
        PELVIS => Limit::Root,
        SPINE1 | SPINE2 | SPINE3 => Limit::Spine,
        NECK | HEAD => Limit::Neck,
        L_COLLAR | R_COLLAR => Limit::Collar,
        L_HIP | R_HIP | L_SHOULDER | R_SHOULDER => Limit::Limb,
        L_KNEE | R_KNEE => Limit::Knee,
        L_ELBOW | R_ELBOW => Limit::Elbow,
        _ => Limit::Distal,
    }
}

fn is_right(j: usize) -> bool {
    JOINT_NAMES[j].starts_with("right")
}

fn mirror_joint(j: usize) -> usize {
    let name = JOINT_NAMES[j];
    let swapped = if let Some(rest) = name.strip_prefix("left") {
        format!("right{rest}")
    } else if let Some(rest) = name.strip_prefix("right") {
        format!("left{rest}")
    } else {
        return j;
    };
    JOINT_NAMES.iter().position(|n| *n == swapped).expect("mirrored joint exists")
}

/// Whole-body postures the sampler jitters around, as
/// `(joint, [flex, twist, abduct])` in degrees. Limb angles are written for
/// the joint's own side: positive abduction moves the limb outward.
const POSTURES: &[&[(usize, [f32; 3])]] = &[
    // standing
    &[],
    // walking
    &[
        (L_HIP, [-25.0, 0.0, 0.0]),
        (R_HIP, [20.0, 0.0, 0.0]),
        (L_KNEE, [10.0, 0.0, 0.0]),
        (R_KNEE, [40.0, 0.0, 0.0]),
        (L_SHOULDER, [25.0, 0.0, 5.0]),
        (R_SHOULDER, [-25.0, 0.0, 5.0]),
        (L_ELBOW, [-15.0, 0.0, 0.0]),
        (R_ELBOW, [-35.0, 0.0, 0.0]),
    ],
    // sitting
    &[
        (L_HIP, [-90.0, 0.0, 10.0]),
        (R_HIP, [-90.0, 0.0, 10.0]),
        (L_KNEE, [90.0, 0.0, 0.0]),
        (R_KNEE, [90.0, 0.0, 0.0]),
        (SPINE1, [10.0, 0.0, 0.0]),
        (L_SHOULDER, [-20.0, 0.0, 5.0]),
        (R_SHOULDER, [-20.0, 0.0, 5.0]),
        (L_ELBOW, [-60.0, 0.0, 0.0]),
        (R_ELBOW, [-60.0, 0.0, 0.0]),
    ],
    // squatting
    &[
        (L_HIP, [-110.0, 0.0, 20.0]),
        (R_HIP, [-110.0, 0.0, 20.0]),
        (L_KNEE, [120.0, 0.0, 0.0]),
        (R_KNEE, [120.0, 0.0, 0.0]),
        (SPINE1, [25.0, 0.0, 0.0]),
        (SPINE2, [10.0, 0.0, 0.0]),
        (L_SHOULDER, [-70.0, 0.0, 0.0]),
        (R_SHOULDER, [-70.0, 0.0, 0.0]),
        (L_ELBOW, [-20.0, 0.0, 0.0]),
        (R_ELBOW, [-20.0, 0.0, 0.0]),
    ],
    // both arms overhead
    &[
        (L_SHOULDER, [-120.0, 0.0, 20.0]),
        (R_SHOULDER, [-120.0, 0.0, 20.0]),
        (L_ELBOW, [-10.0, 0.0, 0.0]),
        (R_ELBOW, [-10.0, 0.0, 0.0]),
        (SPINE2, [-5.0, 0.0, 0.0]),
    ],
    // reaching forward
    &[
        (L_SHOULDER, [-90.0, 0.0, 0.0]),
        (R_SHOULDER, [-90.0, 0.0, 0.0]),
        (L_ELBOW, [-5.0, 0.0, 0.0]),
        (R_ELBOW, [-5.0, 0.0, 0.0]),
        (SPINE1, [15.0, 0.0, 0.0]),
    ],
    // waving with one hand
    &[(L_SHOULDER, [-100.0, 0.0, 40.0]), (L_ELBOW, [-110.0, 0.0, 0.0]), (NECK, [0.0, 15.0, 0.0])],
    // lunge
    &[
        (L_HIP, [-70.0, 0.0, 0.0]),
        (L_KNEE, [80.0, 0.0, 0.0]),
        (R_HIP, [30.0, 0.0, 0.0]),
        (R_KNEE, [20.0, 0.0, 0.0]),
        (SPINE1, [10.0, 0.0, 0.0]),
        (L_SHOULDER, [-10.0, 0.0, 30.0]),
        (R_SHOULDER, [-10.0, 0.0, 30.0]),
    ],
    // arms folded across the chest
    &[
        (L_SHOULDER, [-40.0, 45.0, 0.0]),
        (R_SHOULDER, [-40.0, 45.0, 0.0]),
        (L_ELBOW, [-100.0, 0.0, 0.0]),
        (R_ELBOW, [-100.0, 0.0, 0.0]),
    ],
    // leaning back, looking up
    &[
        (SPINE1, [-15.0, 0.0, 0.0]),
        (SPINE2, [-10.0, 0.0, 0.0]),
        (NECK, [-15.0, 0.0, 0.0]),
        (HEAD, [-10.0, 0.0, 0.0]),
        (L_SHOULDER, [10.0, 0.0, 15.0]),
        (R_SHOULDER, [10.0, 0.0, 15.0]),
    ],
    // twisting the torso
    &[
        (SPINE1, [0.0, 15.0, 0.0]),
        (SPINE2, [0.0, 15.0, 0.0]),
        (SPINE3, [0.0, 10.0, 0.0]),
        (L_SHOULDER, [-45.0, 0.0, 10.0]),
        (R_SHOULDER, [30.0, 0.0, 10.0]),
        (L_ELBOW, [-50.0, 0.0, 0.0]),
    ],
    // wide stance, arms out
    &[
        (L_HIP, [0.0, 0.0, 30.0]),
        (R_HIP, [0.0, 0.0, 30.0]),
        (L_KNEE, [20.0, 0.0, 0.0]),
        (R_KNEE, [20.0, 0.0, 0.0]),
        (L_SHOULDER, [0.0, 0.0, 45.0]),
        (R_SHOULDER, [0.0, 0.0, 45.0]),
    ],
];

pub fn num_postures() -> usize {
    POSTURES.len()
}

fn rotation_from_angles(j: usize, [flex, twist, abduct]: [f32; 3]) -> Matrix3<f32> {
    let (flex, twist, abduct) = (flex.to_radians(), twist.to_radians(), abduct.to_radians());
    let limb_side = matches!(limit_of(j), Limit::Limb | Limit::Knee | Limit::Elbow | Limit::Distal | Limit::Collar);
    // outward for a left limb is a negative turn about z; the right side mirrors
    let (twist, abduct) = match (limb_side, is_right(j)) {
        (true, false) => (twist, -abduct),
        (true, true) => (-twist, abduct),
        (false, _) => (twist, abduct),
    };
    if j == PELVIS {
        // flex is pitch, twist is the yaw about the vertical axis
        return axis_angle(Vector3::new(0.0, twist, 0.0))
            * axis_angle(Vector3::new(flex, 0.0, 0.0))
            * axis_angle(Vector3::new(0.0, 0.0, abduct));
    }
    axis_angle(Vector3::new(0.0, 0.0, abduct)) * axis_angle(Vector3::new(flex, 0.0, 0.0)) * axis_angle(Vector3::new(0.0, twist, 0.0))
}

/// Draws a pose around one of the built-in postures, each joint jittered and
/// clamped to its anatomical range. A [`ZeroNoise`] source gives the rest
/// pose at `(0, 0, 3)`.
pub fn sample_pose(noise: &mut impl PoseNoise) -> PoseParams {
    let k = POSTURES.len();
    let posture = (noise.uniform(0.0, k as f32) as usize).min(k - 1);
    let mirrored = noise.uniform(0.0, 1.0) > 0.5;
    let mut targets = [[0.0f32; 3]; NUM_JOINTS];
    for &(j, angles) in POSTURES[posture] {
        if mirrored {
            let m = mirror_joint(j);
            targets[m] = if m == j { [angles[0], -angles[1], -angles[2]] } else { angles };
        } else {
            targets[j] = angles;
        }
    }
    let mut theta = Vec::with_capacity(THETA_DIM);
    for (j, target) in targets.iter().enumerate() {
        let (range, jitter) = limits(limit_of(j));
        let mut angles = [0.0f32; 3];
        for a in 0..3 {
            let (lo, hi) = range[a];
            let offset = if j == PELVIS && a == 1 { noise.uniform(lo, hi) } else { noise.uniform(-jitter[a], jitter[a]) };
            angles[a] = (target[a] + offset).clamp(lo, hi);
        }
        theta.extend_from_slice(&matrix_to_rot6d(&rotation_from_angles(j, angles)));
    }
    let beta = (0..BETA_DIM).map(|_| noise.gaussian(0.5).clamp(-2.0, 2.0)).collect();
    let trans = [noise.uniform(-1.0, 1.0), noise.uniform(-1.0, 1.0), 3.0 + noise.uniform(-1.0, 2.0)];
    PoseParams { theta, beta, trans }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_px: f32,
    pub p_occ: f32,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma_px: 3.0, p_occ: 0.15 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_px >= 0.0) || !(0.0..=1.0).contains(&self.p_occ) {
            return Err(Error::Config(format!("invalid noise config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub keypoints: Keypoints2D,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f32; 4],
    pub feature_vec: Vec<f32>,
}

/// Simulated detector output for a ground-truth pose.
pub fn observe<R: Rng + ?Sized>(
    gt: &PoseParams,
    template: &BodyTemplate,
    camera: &Camera,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<Observation> {
    cfg.validate()?;
    let joints = forward_kinematics(gt, template)?.joints;
    let exact = project(camera, &joints)?;
    let pixel = Normal::new(0.0f32, cfg.sigma_px.max(f32::MIN_POSITIVE)).expect("valid std");
    let mut uv = Vec::with_capacity(NUM_JOINTS);
    let mut confidence = Vec::with_capacity(NUM_JOINTS);
    for p in &exact {
        let (du, dv) = if cfg.sigma_px > 0.0 { (pixel.sample(rng), pixel.sample(rng)) } else { (0.0, 0.0) };
        let occluded = rng.random::<f32>() < cfg.p_occ;
        let c = rng.random_range(0.7f32..1.0);
        uv.push([p[0] + du, p[1] + dv]);
        confidence.push(if occluded { 0.0 } else { c });
    }

    let (mut lo, mut hi) = ([f32::MAX; 2], [f32::MIN; 2]);
    let visible = uv.iter().zip(&confidence).filter(|(_, &c)| c > 0.0).map(|(p, _)| p);
    for p in exact.iter().chain(visible) {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let pad = [0.1 * (hi[0] - lo[0]) + 1.0, 0.1 * (hi[1] - lo[1]) + 1.0];
    let bbox = [lo[0] - pad[0], lo[1] - pad[1], hi[0] - lo[0] + 2.0 * pad[0], hi[1] - lo[1] + 2.0 * pad[1]];
    let center = [bbox[0] + 0.5 * bbox[2], bbox[1] + 0.5 * bbox[3]];
    for (p, &c) in uv.iter_mut().zip(&confidence) {
        if c == 0.0 {
            *p = center;
        }
    }
    let keypoints = Keypoints2D { uv, confidence };
    let feature_vec = feature_vector(&keypoints, bbox, camera);
    Ok(Observation { keypoints, bbox, feature_vec })
}

/// 48 keypoint coordinates relative to the bbox center and scaled by its
/// longer side, 8 pooled confidences, the bbox normalized by image size, and
/// 4 zeros.
pub fn feature_vector(kp: &Keypoints2D, bbox: [f32; 4], camera: &Camera) -> Vec<f32> {
    let center = [bbox[0] + 0.5 * bbox[2], bbox[1] + 0.5 * bbox[3]];
    let scale = bbox[2].max(bbox[3]).max(1.0);
    let mut f = Vec::with_capacity(FEATURE_DIM);
    for p in &kp.uv {
        f.push((p[0] - center[0]) / scale);
        f.push((p[1] - center[1]) / scale);
    }
    for chunk in kp.confidence.chunks(3) {
        f.push(chunk.iter().sum::<f32>() / chunk.len() as f32);
    }
    let [w, h] = camera.image_size.map(|s| s as f32);
    f.extend_from_slice(&[center[0] / w, center[1] / h, bbox[2] / w, bbox[3] / h]);
    f.resize(FEATURE_DIM, 0.0);
    f
}

/// The fixed `(part, state)` token list; a token id is its index.
pub const VOCABULARY: [(&str, &str); 39] = [
    ("global", "standing"),
    ("global", "sitting-like"),
    ("global", "lying-like"),
    ("facing", "camera"),
    ("facing", "away"),
    ("facing", "image-left"),
    ("facing", "image-right"),
    ("torso", "upright"),
    ("torso", "leaning-forward"),
    ("torso", "leaning-back"),
    ("torso", "twisted"),
    ("head", "neutral"),
    ("head", "turned-left"),
    ("head", "turned-right"),
    ("head", "tilted"),
    ("left_arm", "raised"),
    ("left_arm", "lowered"),
    ("left_arm", "bent"),
    ("left_arm", "extended"),
    ("left_arm", "crossed-midline"),
    ("left_arm", "forward"),
    ("left_arm", "out-to-side"),
    ("right_arm", "raised"),
    ("right_arm", "lowered"),
    ("right_arm", "bent"),
    ("right_arm", "extended"),
    ("right_arm", "crossed-midline"),
    ("right_arm", "forward"),
    ("right_arm", "out-to-side"),
    ("left_leg", "straight"),
    ("left_leg", "bent"),
    ("left_leg", "crossed"),
    ("left_leg", "wide-stance"),
    ("left_leg", "forward"),
    ("right_leg", "straight"),
    ("right_leg", "bent"),
    ("right_leg", "crossed"),
    ("right_leg", "wide-stance"),
    ("right_leg", "forward"),
];

pub fn vocab_size() -> usize {
    VOCABULARY.len()
}

pub fn token_id(part: &str, state: &str) -> Option<u32> {
    VOCABULARY.iter().position(|&(p, s)| p == part && s == state).map(|i| i as u32)
}

pub fn token_name(id: u32) -> Result<String> {
    VOCABULARY.get(id as usize).map(|(p, s)| format!("{p}:{s}")).ok_or(Error::Vocabulary(id))
}

fn tok(part: &str, state: &str) -> u32 {
    token_id(part, state).expect("labeler only emits vocabulary tokens")
}

fn angle_deg(a: Vector3<f32>, b: Vector3<f32>) -> f32 {
    let c = a.dot(&b) / (a.norm() * b.norm()).max(1e-9);
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Part labels from joint angles and positions. Shape and translation are
/// ignored: the pose is evaluated at zero shape with the pelvis at the origin.
pub fn describe(theta: &[f32], template: &BodyTemplate) -> Result<Vec<u32>> {
    let params = PoseParams { theta: theta.to_vec(), beta: vec![0.0; BETA_DIM], trans: [0.0; 3] };
    let posed = forward_kinematics(&params, template)?;
    let world = |j: usize| posed.joints.point(j);
    let root_inv = posed.rotations[PELVIS].transpose();
    let local = |j: usize| root_inv * world(j);
    let mut tokens = Vec::with_capacity(16);

    let knee_flex = |hip, knee, ankle| angle_deg(local(knee) - local(hip), local(ankle) - local(knee));
    let torso_up = (world(NECK) - world(PELVIS)).normalize();
    let pelvis_height = world(L_ANKLE).y.max(world(R_ANKLE).y) - world(PELVIS).y;
    let mean_knee = 0.5 * (knee_flex(L_HIP, L_KNEE, L_ANKLE) + knee_flex(R_HIP, R_KNEE, R_ANKLE));
    let global = if -torso_up.y < 50f32.to_radians().cos() {
        "lying-like"
    } else if pelvis_height < 0.6 && mean_knee > 45.0 {
        "sitting-like"
    } else {
        "standing"
    };
    tokens.push(tok("global", global));

    // camera looks along +z; facing the camera means pointing toward -z
    let forward = posed.rotations[PELVIS] * Vector3::new(0.0, 0.0, -1.0);
    let heading = forward.x.atan2(-forward.z).to_degrees();
    let facing = if heading.abs() <= 45.0 {
        "camera"
    } else if heading.abs() >= 135.0 {
        "away"
    } else if heading > 0.0 {
        "image-right"
    } else {
        "image-left"
    };
    tokens.push(tok("facing", facing));

    let up = (local(NECK) - local(PELVIS)).normalize();
    let lean = 20f32.to_radians().sin();
    tokens.push(tok(
        "torso",
        if up.z < -lean {
            "leaning-forward"
        } else if up.z > lean {
            "leaning-back"
        } else {
            "upright"
        },
    ));
    let shoulders = local(R_SHOULDER) - local(L_SHOULDER);
    let hips = local(R_HIP) - local(L_HIP);
    if angle_deg(Vector3::new(shoulders.x, 0.0, shoulders.z), Vector3::new(hips.x, 0.0, hips.z)) > 20.0 {
        tokens.push(tok("torso", "twisted"));
    }

    let rel = posed.rotations[SPINE3].transpose() * posed.rotations[HEAD];
    let facing = rel * Vector3::new(0.0, 0.0, -1.0);
    let head_up = rel * Vector3::new(0.0, -1.0, 0.0);
    let turn = 25f32.to_radians().sin();
    let head = if facing.x > turn {
        "turned-left"
    } else if facing.x < -turn {
        "turned-right"
    } else if head_up.x.abs() > 15f32.to_radians().sin() || facing.y.abs() > turn {
        "tilted"
    } else {
        "neutral"
    };
    tokens.push(tok("head", head));

    for (part, s, e, w, side) in [("left_arm", L_SHOULDER, L_ELBOW, L_WRIST, 1.0f32), ("right_arm", R_SHOULDER, R_ELBOW, R_WRIST, -1.0)] {
        let (ps, pe, pw) = (local(s), local(e), local(w));
        let flex = angle_deg(pe - ps, pw - pe);
        let reach = pw - ps;
        let length = (pe - ps).norm() + (pw - pe).norm();
        let raised = pw.y < ps.y;
        let extended = !raised && flex < 45.0 && Vector3::new(reach.x, 0.0, reach.z).norm() > 0.6 * length;
        tokens.push(tok(part, if raised { "raised" } else if extended { "extended" } else { "lowered" }));
        if flex > 90.0 {
            tokens.push(tok(part, "bent"));
        }
        if side * pw.x < 0.0 {
            tokens.push(tok(part, "crossed-midline"));
        }
        if ps.z - pw.z > 0.2 {
            tokens.push(tok(part, "forward"));
        }
        if side * reach.x > 0.25 {
            tokens.push(tok(part, "out-to-side"));
        }
    }

    for (part, h, k, a, side) in [("left_leg", L_HIP, L_KNEE, L_ANKLE, 1.0f32), ("right_leg", R_HIP, R_KNEE, R_ANKLE, -1.0)] {
        let (ph, pk, pa) = (local(h), local(k), local(a));
        tokens.push(tok(part, if knee_flex(h, k, a) > 90.0 { "bent" } else { "straight" }));
        if side * pa.x < 0.0 {
            tokens.push(tok(part, "crossed"));
        }
        if side * (pa.x - ph.x) > 0.15 {
            tokens.push(tok(part, "wide-stance"));
        }
        if ph.z - pk.z > 0.2 {
            tokens.push(tok(part, "forward"));
        }
    }

    tokens.truncate(MAX_TOKENS);
    Ok(tokens)
}

/// One corpus line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: u64,
    pub gt_params: PoseParams,
    pub camera: Camera,
    pub obs_keypoints: Keypoints2D,
    pub bbox: [f32; 4],
    pub feature_vec: Vec<f32>,
    pub tokens: Vec<u32>,
}

/// Scene `id` of the corpus seeded by `seed`; depends on nothing else.
pub fn generate_scene(
    seed: u64,
    id: u64,
    template: &BodyTemplate,
    camera: &Camera,
    cfg: &NoiseConfig,
) -> Result<SceneRecord> {
    let mut rng = substream(seed, "scene", id);
    for _ in 0..MAX_ATTEMPTS {
        let gt = sample_pose(&mut RngNoise(&mut rng));
        let obs = match observe(&gt, template, camera, cfg, &mut rng) {
            Ok(o) => o,
            Err(Error::BehindCamera { .. }) => continue,
            Err(e) => return Err(e),
        };
        let tokens = describe(&gt.theta, template)?;
        return Ok(SceneRecord {
            id,
            gt_params: gt,
            camera: *camera,
            obs_keypoints: obs.keypoints,
            bbox: obs.bbox,
            feature_vec: obs.feature_vec,
            tokens,
        });
    }
    Err(Error::Contract(format!("scene {id}: no valid sample in {MAX_ATTEMPTS} attempts")))
}

/// Scenes `first..first + count`, generated in parallel.
pub fn generate_corpus(
    seed: u64,
    first: u64,
    count: usize,
    template: &BodyTemplate,
    camera: &Camera,
    cfg: &NoiseConfig,
) -> Result<Vec<SceneRecord>> {
    camera.validate()?;
    cfg.validate()?;
    (first..first + count as u64).into_par_iter().map(|id| generate_scene(seed, id, template, camera, cfg)).collect()
}

pub fn write_corpus(path: &Path, records: &[SceneRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<SceneRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// SHA-256 over the serialized records, hex encoded.
pub fn corpus_hash(records: &[SceneRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}
