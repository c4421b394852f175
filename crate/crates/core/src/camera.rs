//! Pinhole projection and the confidence-weighted reprojection gradient.

use serde::{Deserialize, Serialize};

use crate::body::JointSet;
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Graph, Real, Var};

/// Points closer than this are treated as behind the camera.
pub const MIN_DEPTH: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    pub focal: f32,
    pub principal: [f32; 2],
    pub image_size: [u32; 2],
}

impl Default for Camera {
    fn default() -> Self {
        Camera { focal: 500.0, principal: [256.0, 256.0], image_size: [512, 512] }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        let [cx, cy] = self.principal;
        if !(self.focal > 0.0) || w == 0 || h == 0 || !(0.0..=w as f32).contains(&cx) || !(0.0..=h as f32).contains(&cy) {
            return Err(Error::Config(format!("invalid camera {self:?}")));
        }
        Ok(())
    }

    pub fn project_point(&self, p: [f32; 3], joint: usize) -> Result<[f32; 2]> {
        if !(p[2] > MIN_DEPTH) {
            return Err(Error::BehindCamera { joint, depth: p[2] });
        }
        Ok([self.focal * p[0] / p[2] + self.principal[0], self.focal * p[1] / p[2] + self.principal[1]])
    }
}

/// Observed 2D joints with per-joint confidence; occluded joints have 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub uv: Vec<[f32; 2]>,
    pub confidence: Vec<f32>,
}

pub fn project(camera: &Camera, joints: &JointSet) -> Result<Vec<[f32; 2]>> {
    joints.positions.iter().enumerate().map(|(j, &p)| camera.project_point(p, j)).collect()
}

/// `Σ_j ‖c_j (Π(J_j) − p_j)‖²`.
pub fn reprojection_loss(camera: &Camera, joints: &JointSet, obs: &Keypoints2D) -> Result<f32> {
    check_counts(joints, obs)?;
    let uv = project(camera, joints)?;
    Ok(uv
        .iter()
        .zip(&obs.uv)
        .zip(&obs.confidence)
        .map(|((p, o), c)| c * c * ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2)))
        .sum())
}

/// Gradient of [`reprojection_loss`] with respect to each 3D joint.
///
/// Joint `j`'s row depends only on joint `j`; zero-confidence rows are zero.
pub fn keypoint_gradient(camera: &Camera, joints: &JointSet, obs: &Keypoints2D) -> Result<Vec<[f32; 3]>> {
    check_counts(joints, obs)?;
    let f = camera.focal;
    joints
        .positions
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let [u, v] = camera.project_point(p, j)?;
            let w = obs.confidence[j] * obs.confidence[j];
            if w == 0.0 {
                return Ok([0.0; 3]);
            }
            let (ru, rv) = (u - obs.uv[j][0], v - obs.uv[j][1]);
            let z = p[2];
            let s = 2.0 * w * f / z;
            Ok([s * ru, s * rv, -s * (ru * p[0] + rv * p[1]) / z])
        })
        .collect()
}

fn check_counts(joints: &JointSet, obs: &Keypoints2D) -> Result<()> {
    if joints.len() != obs.uv.len() || obs.uv.len() != obs.confidence.len() {
        return Err(Error::shape(
            "keypoints",
            format!("{} joints, {} observations, {} confidences", joints.len(), obs.uv.len(), obs.confidence.len()),
        ));
    }
    Ok(())
}

/// Differentiable projection of batched joints `[B×3J]` to pixels `[B×2J]`.
///
/// `depth_mask` (`[B×1]`, 0 or 1) replaces the depth of masked rows with 1 m
/// so rows that would be behind the camera stay finite.
pub fn project_graph<T: Real>(g: &mut Graph<T>, camera: &Camera, joints: Var, depth_mask: Option<Var>) -> Result<Var> {
    let b = g.value(joints).rows();
    let nj = g.value(joints).cols() / 3;
    let flat = g.reshape(joints, &[b * nj, 3])?;
    let x = g.slice_cols(flat, 0, 1)?;
    let y = g.slice_cols(flat, 1, 1)?;
    let mut z = g.slice_cols(flat, 2, 1)?;
    if let Some(mask) = depth_mask {
        // expand [B×1] to one entry per joint
        let m = g.broadcast_cols(mask, nj)?;
        let m = g.reshape(m, &[b * nj, 1])?;
        let kept = g.mul(z, m)?;
        let inv: Vec<T> = g.value(m).data().iter().map(|&v| T::one() - v).collect();
        let fill = g.constant(DenseArray::new(vec![b * nj, 1], inv)?);
        z = g.add(kept, fill)?;
    }
    let xz = g.div(x, z)?;
    let yz = g.div(y, z)?;
    let u = g.scale(xz, T::of(camera.focal as f64));
    let u = g.add_const(u, T::of(camera.principal[0] as f64));
    let v = g.scale(yz, T::of(camera.focal as f64));
    let v = g.add_const(v, T::of(camera.principal[1] as f64));
    let uv = g.concat_cols(&[u, v])?;
    g.reshape(uv, &[b, 2 * nj])
}
