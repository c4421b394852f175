//! A 24-joint SMPL-like body: 6D joint rotations, bone-length shape
//! blendshapes, a 48-vertex rigidly skinned template, and a joint regressor
//! `W` with `J = W·M` exact by construction.
//!
//! Frame convention matches the camera: x to the body's left, y down, z away
//! from the camera. The rest pose stands upright facing the camera (-z) with
//! arms hanging.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph, Real, Var};

pub const NUM_JOINTS: usize = 24;
pub const NUM_VERTICES: usize = 2 * NUM_JOINTS;
pub const THETA_DIM: usize = 6 * NUM_JOINTS;
pub const BETA_DIM: usize = 10;
pub const TRANS_DIM: usize = 3;
/// Half-distance between the two vertices bound to each joint, meters.
pub const VERTEX_HALF_SPAN: f32 = 0.02;

pub const PELVIS: usize = 0;
pub const L_HIP: usize = 1;
pub const R_HIP: usize = 2;
pub const SPINE1: usize = 3;
pub const L_KNEE: usize = 4;
pub const R_KNEE: usize = 5;
pub const SPINE2: usize = 6;
pub const L_ANKLE: usize = 7;
pub const R_ANKLE: usize = 8;
pub const SPINE3: usize = 9;
pub const L_FOOT: usize = 10;
pub const R_FOOT: usize = 11;
pub const NECK: usize = 12;
pub const L_COLLAR: usize = 13;
pub const R_COLLAR: usize = 14;
pub const HEAD: usize = 15;
pub const L_SHOULDER: usize = 16;
pub const R_SHOULDER: usize = 17;
pub const L_ELBOW: usize = 18;
pub const R_ELBOW: usize = 19;
pub const L_WRIST: usize = 20;
pub const R_WRIST: usize = 21;
pub const L_HAND: usize = 22;
pub const R_HAND: usize = 23;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
    "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
];

pub const PARENTS: [i32; NUM_JOINTS] = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];

/// Bone vector from the parent joint, meters, left side (+x). Right-side
/// entries mirror x. Pelvis-to-head-top is about 1.7 m.
const REST_OFFSETS: [[f32; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.09, 0.08, 0.0],
    [-0.09, 0.08, 0.0],
    [0.0, -0.11, 0.0],
    [0.0, 0.40, 0.0],
    [0.0, 0.40, 0.0],
    [0.0, -0.13, 0.0],
    [0.0, 0.40, 0.0],
    [0.0, 0.40, 0.0],
    [0.0, -0.06, 0.0],
    [0.0, 0.06, -0.12],
    [0.0, 0.06, -0.12],
    [0.0, -0.22, 0.0],
    [0.07, -0.15, 0.0],
    [-0.07, -0.15, 0.0],
    [0.0, -0.18, 0.0],
    [0.11, 0.02, 0.0],
    [-0.11, 0.02, 0.0],
    [0.0, 0.27, 0.0],
    [0.0, 0.27, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.25, 0.0],
    [0.0, 0.08, 0.0],
    [0.0, 0.08, 0.0],
];

const LEG_BONES: [usize; 6] = [L_KNEE, R_KNEE, L_ANKLE, R_ANKLE, L_FOOT, R_FOOT];
const ARM_BONES: [usize; 6] = [L_ELBOW, R_ELBOW, L_WRIST, R_WRIST, L_HAND, R_HAND];
const SHAPE_SEED: u64 = 0x5eed_b0d7;

/// The optimization variable: 6D joint rotations, shape, translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub theta: Vec<f32>,
    pub beta: Vec<f32>,
    pub trans: [f32; 3],
}

impl PoseParams {
    /// Identity rotations, zero shape.
    pub fn rest(trans: [f32; 3]) -> Self {
        PoseParams { theta: identity_theta(), beta: vec![0.0; BETA_DIM], trans }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != THETA_DIM || self.beta.len() != BETA_DIM {
            return Err(Error::shape(
                "pose_params",
                format!("theta {} / beta {}", self.theta.len(), self.beta.len()),
            ));
        }
        if !self.theta.iter().chain(&self.beta).chain(&self.trans).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("pose parameters".into()));
        }
        Ok(())
    }

    pub fn block(&self, joint: usize) -> &[f32] {
        &self.theta[6 * joint..6 * joint + 6]
    }
}

pub fn identity_theta() -> Vec<f32> {
    (0..NUM_JOINTS).flat_map(|_| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).collect()
}

/// Gram-Schmidt map from two 3-vectors to a rotation whose first two
/// columns span them.
pub fn rot6d_to_matrix(r: &[f32]) -> Result<Matrix3<f32>> {
    rot6d_to_matrix_at(r, 0)
}

fn rot6d_to_matrix_at(r: &[f32], joint: usize) -> Result<Matrix3<f32>> {
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);
    let na = a.norm();
    if !(na > 1e-8) {
        return Err(Error::Degenerate { joint });
    }
    let e1 = a / na;
    let bp = b - e1 * e1.dot(&b);
    let nb = bp.norm();
    if !(nb > 1e-8) {
        return Err(Error::Degenerate { joint });
    }
    let e2 = bp / nb;
    let e3 = e1.cross(&e2);
    Ok(Matrix3::from_columns(&[e1, e2, e3]))
}

/// First two columns of `m`.
pub fn matrix_to_rot6d(m: &Matrix3<f32>) -> [f32; 6] {
    [m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]
}

/// Sampling-time check: neither column near zero nor the pair near parallel.
pub fn is_well_conditioned_6d(r: &[f32]) -> bool {
    let a = Vector3::new(r[0], r[1], r[2]);
    let b = Vector3::new(r[3], r[4], r[5]);
    let (na, nb) = (a.norm(), b.norm());
    na > 1e-4 && nb > 1e-4 && (a.dot(&b) / (na * nb)).abs() < 0.999
}

/// Rotation from an axis-angle vector (radians).
pub fn axis_angle(v: Vector3<f32>) -> Matrix3<f32> {
    Rotation3::new(v).into_inner()
}

/// Joint positions, meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSet {
    pub positions: Vec<[f32; 3]>,
}

impl JointSet {
    pub fn point(&self, j: usize) -> Vector3<f32> {
        Vector3::from(self.positions[j])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn translated(&self, d: [f32; 3]) -> JointSet {
        JointSet { positions: self.positions.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect() }
    }

    /// Positions relative to `joint`.
    pub fn centered_on(&self, joint: usize) -> JointSet {
        let r = self.positions[joint];
        self.translated([-r[0], -r[1], -r[2]])
    }

    pub fn flat(&self) -> Vec<f32> {
        self.positions.iter().flatten().copied().collect()
    }
}

/// Output of forward kinematics.
#[derive(Clone, Debug)]
pub struct Posed {
    pub joints: JointSet,
    /// World rotation of each joint frame.
    pub rotations: Vec<Matrix3<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    pub parent: [i32; NUM_JOINTS],
    pub rest_offsets: Vec<[f32; 3]>,
    /// `[joint][axis][component]`, meters per unit of beta.
    pub shape_dirs: Vec<[[f32; BETA_DIM]; 3]>,
    pub vertices_rest: Vec<[f32; 3]>,
    /// `[vertex × joint]`.
    pub skin_weights: DenseArray<f32>,
    /// `[joint × vertex]`.
    pub joint_regressor: DenseArray<f32>,
}

impl Default for BodyTemplate {
    fn default() -> Self {
        Self::canonical()
    }
}

impl BodyTemplate {
    pub fn canonical() -> Self {
        let rest_offsets = REST_OFFSETS.to_vec();
        let mut shape_dirs = vec![[[0.0f32; BETA_DIM]; 3]; NUM_JOINTS];
        let mut rng = ChaCha8Rng::seed_from_u64(SHAPE_SEED);
        let jitter = Normal::new(0.0f32, 0.004).expect("valid std");
        for j in 1..NUM_JOINTS {
            for axis in 0..3 {
                let o = rest_offsets[j][axis];
                shape_dirs[j][axis][0] = 0.1 * o;
                if LEG_BONES.contains(&j) {
                    shape_dirs[j][axis][1] = 0.1 * o;
                }
                if ARM_BONES.contains(&j) {
                    shape_dirs[j][axis][2] = 0.1 * o;
                }
                for c in 3..BETA_DIM {
                    shape_dirs[j][axis][c] = jitter.sample(&mut rng);
                }
            }
        }

        let rest_joints = cumulative_offsets(&rest_offsets);
        let mut vertices_rest = Vec::with_capacity(NUM_VERTICES);
        let mut skin = vec![0.0; NUM_VERTICES * NUM_JOINTS];
        let mut regressor = vec![0.0; NUM_JOINTS * NUM_VERTICES];
        for (j, p) in rest_joints.iter().enumerate() {
            for (k, sign) in [-1.0f32, 1.0].into_iter().enumerate() {
                let v = 2 * j + k;
                vertices_rest.push([p[0] + sign * VERTEX_HALF_SPAN, p[1], p[2]]);
                skin[v * NUM_JOINTS + j] = 1.0;
                regressor[j * NUM_VERTICES + v] = 0.5;
            }
        }
        BodyTemplate {
            parent: PARENTS,
            rest_offsets,
            shape_dirs,
            vertices_rest,
            skin_weights: DenseArray::matrix(NUM_VERTICES, NUM_JOINTS, skin).expect("dims"),
            joint_regressor: DenseArray::matrix(NUM_JOINTS, NUM_VERTICES, regressor).expect("dims"),
        }
    }

    /// Rest joint positions at zero shape, pelvis at the origin.
    pub fn rest_joints(&self) -> JointSet {
        JointSet { positions: cumulative_offsets(&self.rest_offsets) }
    }

    pub fn shaped_offset(&self, joint: usize, beta: &[f32]) -> Vector3<f32> {
        let mut o = Vector3::from(self.rest_offsets[joint]);
        for axis in 0..3 {
            o[axis] += self.shape_dirs[joint][axis].iter().zip(beta).map(|(d, b)| d * b).sum::<f32>();
        }
        o
    }

    /// Checks the structural invariants of the template.
    pub fn validate(&self) -> Result<()> {
        let roots = self.parent.iter().filter(|&&p| p < 0).count();
        if roots != 1 || self.parent[0] != -1 {
            return Err(Error::Contract("template must have exactly one root at index 0".into()));
        }
        for (j, &p) in self.parent.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Contract(format!("joint {j} has parent {p}; parents must precede children")));
            }
        }
        for (name, m) in [("skin_weights", &self.skin_weights), ("joint_regressor", &self.joint_regressor)] {
            for r in 0..m.rows() {
                let s: f32 = m.row_slice(r).iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(Error::Contract(format!("{name} row {r} sums to {s}")));
                }
            }
        }
        Ok(())
    }
}

fn cumulative_offsets(offsets: &[[f32; 3]]) -> Vec<[f32; 3]> {
    let mut out: Vec<[f32; 3]> = Vec::with_capacity(offsets.len());
    for (j, o) in offsets.iter().enumerate() {
        let base = if PARENTS[j] < 0 { [0.0; 3] } else { out[PARENTS[j] as usize] };
        out.push([base[0] + o[0], base[1] + o[1], base[2] + o[2]]);
    }
    out
}

/// World joint positions and rotations.
pub fn forward_kinematics(params: &PoseParams, template: &BodyTemplate) -> Result<Posed> {
    params.validate()?;
    let mut rotations: Vec<Matrix3<f32>> = Vec::with_capacity(NUM_JOINTS);
    let mut positions: Vec<Vector3<f32>> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let local = rot6d_to_matrix_at(params.block(j), j)?;
        let offset = template.shaped_offset(j, &params.beta);
        let p = template.parent[j];
        if p < 0 {
            positions.push(Vector3::from(params.trans) + offset);
            rotations.push(local);
        } else {
            let (pr, pp) = (rotations[p as usize], positions[p as usize]);
            positions.push(pp + pr * offset);
            rotations.push(pr * local);
        }
    }
    Ok(Posed {
        joints: JointSet { positions: positions.iter().map(|v| [v.x, v.y, v.z]).collect() },
        rotations,
    })
}

/// Linear blend skinning of the template vertices.
pub fn skin_vertices(params: &PoseParams, template: &BodyTemplate) -> Result<Vec<[f32; 3]>> {
    let posed = forward_kinematics(params, template)?;
    Ok(skin_posed(&posed, template))
}

pub fn skin_posed(posed: &Posed, template: &BodyTemplate) -> Vec<[f32; 3]> {
    let rest = template.rest_joints();
    (0..NUM_VERTICES)
        .map(|v| {
            let mut acc = Vector3::zeros();
            for (j, &w) in template.skin_weights.row_slice(v).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let local = Vector3::from(template.vertices_rest[v]) - rest.point(j);
                acc += w * (posed.joints.point(j) + posed.rotations[j] * local);
            }
            [acc.x, acc.y, acc.z]
        })
        .collect()
}

/// `J = W·M` for vertices `M: [V×3]` and regressor `W: [J×V]`.
pub fn joints_from_vertices(vertices: &DenseArray<f32>, regressor: &DenseArray<f32>) -> Result<JointSet> {
    if vertices.cols() != 3 || regressor.cols() != vertices.rows() {
        return Err(Error::shape(
            "joints_from_vertices",
            format!("W {:?} vs M {:?}", regressor.shape(), vertices.shape()),
        ));
    }
    let j = regressor.matmul(vertices)?;
    Ok(JointSet { positions: (0..j.rows()).map(|r| [j.get(r, 0), j.get(r, 1), j.get(r, 2)]).collect() })
}

pub fn vertices_array(vertices: &[[f32; 3]]) -> DenseArray<f32> {
    DenseArray::matrix(vertices.len(), 3, vertices.iter().flatten().copied().collect()).expect("dims")
}

/// Differentiable forward kinematics over a batch.
///
/// `theta: [B×144]`, `beta: [B×10]`, `trans: [B×3]`; returns joints `[B×72]`
/// laid out `(x, y, z)` per joint.
pub fn forward_kinematics_graph<T: Real>(
    g: &mut Graph<T>,
    template: &BodyTemplate,
    theta: Var,
    beta: Var,
    trans: Var,
) -> Result<Var> {
    let b = g.value(theta).rows();
    if g.value(theta).cols() != THETA_DIM || g.value(beta).cols() != BETA_DIM || g.value(trans).cols() != 3 {
        return Err(Error::shape("forward_kinematics_graph", "expected [B,144], [B,10], [B,3]"));
    }
    let mut frames: Vec<[Var; 3]> = Vec::with_capacity(NUM_JOINTS);
    let mut positions: Vec<Var> = Vec::with_capacity(NUM_JOINTS);
    for j in 0..NUM_JOINTS {
        let local = rot6d_graph(g, theta, j)?;

        let dirs: Vec<T> = (0..BETA_DIM)
            .flat_map(|c| (0..3).map(move |axis| (c, axis)))
            .map(|(c, axis)| T::of(template.shape_dirs[j][axis][c] as f64))
            .collect();
        let dirs = g.constant(DenseArray::matrix(BETA_DIM, 3, dirs)?);
        let rest = g.constant(DenseArray::row(template.rest_offsets[j].iter().map(|&x| T::of(x as f64)).collect()));
        let shaped = g.matmul(beta, dirs)?;
        let rest = g.broadcast_rows(rest, b)?;
        let offset = g.add(shaped, rest)?;

        let p = template.parent[j];
        if p < 0 {
            positions.push(g.add(trans, offset)?);
            frames.push(local);
        } else {
            let parent = frames[p as usize];
            let moved = rotate_rows(g, parent, offset)?;
            positions.push(g.add(positions[p as usize], moved)?);
            let world = [
                rotate_rows(g, parent, local[0])?,
                rotate_rows(g, parent, local[1])?,
                rotate_rows(g, parent, local[2])?,
            ];
            frames.push(world);
        }
    }
    g.concat_cols(&positions)
}

/// Rotation columns `[e1, e2, e3]` (each `[B×3]`) for joint `j`'s 6D block.
fn rot6d_graph<T: Real>(g: &mut Graph<T>, theta: Var, j: usize) -> Result<[Var; 3]> {
    let a = g.slice_cols(theta, 6 * j, 3)?;
    let bvec = g.slice_cols(theta, 6 * j + 3, 3)?;
    let e1 = normalize_rows(g, a)?;
    let proj = row_dot(g, e1, bvec)?;
    let proj = g.broadcast_cols(proj, 3)?;
    let along = g.mul(e1, proj)?;
    let bp = g.sub(bvec, along)?;
    let e2 = normalize_rows(g, bp)?;
    let e3 = g.cross_rows(e1, e2)?;
    Ok([e1, e2, e3])
}

fn row_dot<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let p = g.mul(a, b)?;
    Ok(g.row_sum(p))
}

fn normalize_rows<T: Real>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let sq = row_dot(g, a, a)?;
    let n = g.sqrt(sq)?;
    let n = g.broadcast_cols(n, 3)?;
    g.div(a, n)
}

/// `R·v` per row, with `R` given by its three column arrays.
fn rotate_rows<T: Real>(g: &mut Graph<T>, cols: [Var; 3], v: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, c) in cols.into_iter().enumerate() {
        let comp = g.slice_cols(v, k, 1)?;
        let comp = g.broadcast_cols(comp, 3)?;
        let term = g.mul(c, comp)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok(acc.expect("three columns"))
}
