//! Initial prediction: an MLP from image features to pose parameters, with
//! the translation read off the bounding box.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::*;
use crate::camera::{project_graph, Camera, MIN_DEPTH};
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp};
use crate::rng::substream;
use crate::scene::{SceneRecord, FEATURE_DIM};
use crate::tensor::{DenseArray, Graph, Real, Var};

pub const OUTPUT_DIM: usize = THETA_DIM + BETA_DIM + TRANS_DIM;
pub const HIDDEN: usize = 256;
/// Body extent in meters that a bbox side of `focal` pixels maps to at 1 m.
const DEPTH_SCALE: f32 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub smpl: f32,
    pub joint: f32,
    pub reproj: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { smpl: 1.0, joint: 5.0, reproj: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.smpl, self.joint, self.reproj];
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative and not all zero: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub weights: LossWeights,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig { epochs: 50, batch: 64, lr: 1e-3, weights: LossWeights::default() }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("regressor batch and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorNet {
    pub mlp: Mlp,
}

/// Bbox quantities the translation is decoded against.
#[derive(Clone, Copy, Debug)]
struct BoxFrame {
    /// Bbox center minus principal point, pixels.
    offset: [f32; 2],
    /// Longer bbox side, pixels.
    size: f32,
    /// Depth at zero log-depth output.
    depth0: f32,
}

impl BoxFrame {
    fn new(bbox: [f32; 4], camera: &Camera) -> Self {
        let size = bbox[2].max(bbox[3]).max(1.0);
        BoxFrame {
            offset: [bbox[0] + 0.5 * bbox[2] - camera.principal[0], bbox[1] + 0.5 * bbox[3] - camera.principal[1]],
            size,
            depth0: camera.focal * DEPTH_SCALE / size,
        }
    }
}

impl RegressorNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut mlp = Mlp::new(&[FEATURE_DIM, HIDDEN, HIDDEN, OUTPUT_DIM], rng);
        mlp.scale_last(0.1);
        RegressorNet { mlp }
    }

    pub fn zeros() -> Self {
        RegressorNet { mlp: Mlp::zeros(&[FEATURE_DIM, HIDDEN, HIDDEN, OUTPUT_DIM]) }
    }

    pub fn predict(&self, feature_vec: &[f32], bbox: [f32; 4], camera: &Camera) -> Result<PoseParams> {
        if feature_vec.len() != FEATURE_DIM {
            return Err(Error::shape("regressor", format!("feature_vec has {} entries", feature_vec.len())));
        }
        let raw = self.mlp.infer(&DenseArray::row(feature_vec.to_vec()))?;
        checked_decode(raw.data(), bbox, camera)
    }

    /// Predictions for many scenes in one batched forward pass.
    pub fn predict_records(&self, records: &[SceneRecord]) -> Result<Vec<PoseParams>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let x = DenseArray::matrix(records.len(), FEATURE_DIM, records.iter().flat_map(|r| r.feature_vec.clone()).collect())?;
        let raw = self.mlp.infer(&x)?;
        records.iter().enumerate().map(|(i, r)| checked_decode(raw.row_slice(i), r.bbox, &r.camera)).collect()
    }
}

/// Network output to parameters: `θ` as a residual over the identity 6D
/// blocks, `β` directly, `π` from bbox-relative pixel offsets and log-depth.
pub fn decode_output(raw: &[f32], bbox: [f32; 4], camera: &Camera) -> PoseParams {
    let frame = BoxFrame::new(bbox, camera);
    let theta = raw[..THETA_DIM].iter().zip(identity_theta()).map(|(r, i)| r + i).collect();
    let beta = raw[THETA_DIM..THETA_DIM + BETA_DIM].to_vec();
    let o = &raw[THETA_DIM + BETA_DIM..];
    let z = frame.depth0 * o[2].exp();
    let x = (frame.offset[0] + o[0] * frame.size) * z / camera.focal;
    let y = (frame.offset[1] + o[1] * frame.size) * z / camera.focal;
    PoseParams { theta, beta, trans: [x, y, z] }
}

/// [`decode_output`] plus the degeneracy check; a degenerate block is nudged
/// by `1e-3` once before giving up.
fn checked_decode(raw: &[f32], bbox: [f32; 4], camera: &Camera) -> Result<PoseParams> {
    let mut p = decode_output(raw, bbox, camera);
    for j in 0..NUM_JOINTS {
        if rot6d_to_matrix(p.block(j)).is_err() {
            let block = &mut p.theta[6 * j..6 * j + 6];
            block[0] += 1e-3;
            block[4] += 1e-3;
            if rot6d_to_matrix(block).is_err() {
                return Err(Error::Degenerate { joint: j });
            }
        }
    }
    p.validate()?;
    Ok(p)
}

/// Differentiable version of [`decode_output`] for a batch of outputs.
fn decode_graph<T: Real>(g: &mut Graph<T>, out: Var, frames: &[BoxFrame], camera: &Camera) -> Result<(Var, Var, Var)> {
    let b = frames.len();
    let raw_theta = g.slice_cols(out, 0, THETA_DIM)?;
    let ident = g.constant(DenseArray::row(identity_theta().into_iter().map(|x| T::of(x as f64)).collect()));
    let ident = g.broadcast_rows(ident, b)?;
    let theta = g.add(raw_theta, ident)?;
    let beta = g.slice_cols(out, THETA_DIM, BETA_DIM)?;

    let column = |g: &mut Graph<T>, f: &dyn Fn(&BoxFrame) -> f32| {
        g.constant(DenseArray::new(vec![b, 1], frames.iter().map(|fr| T::of(f(fr) as f64)).collect()).expect("dims"))
    };
    let depth0 = column(g, &|fr| fr.depth0);
    let size = column(g, &|fr| fr.size);
    let off_u = column(g, &|fr| fr.offset[0]);
    let off_v = column(g, &|fr| fr.offset[1]);

    let base = THETA_DIM + BETA_DIM;
    let log_depth = g.slice_cols(out, base + 2, 1)?;
    let e = g.exp(log_depth);
    let z = g.mul(e, depth0)?;
    let inv_f = T::of(1.0 / camera.focal as f64);
    let mut xy = Vec::with_capacity(2);
    for (k, off) in [(0, off_u), (1, off_v)] {
        let d = g.slice_cols(out, base + k, 1)?;
        let d = g.mul(d, size)?;
        let pix = g.add(d, off)?;
        let m = g.mul(pix, z)?;
        xy.push(g.scale(m, inv_f));
    }
    let trans = g.concat_cols(&[xy[0], xy[1], z])?;
    Ok((theta, beta, trans))
}

/// Ground truth for a batch, as graph constants.
pub struct TargetBatch<T: Real> {
    pub theta: DenseArray<T>,
    pub beta: DenseArray<T>,
    /// Camera-frame joints `[B×72]`.
    pub joints: DenseArray<T>,
    /// Noiseless projections `[B×48]`.
    pub keypoints: DenseArray<T>,
}

impl<T: Real> TargetBatch<T> {
    pub fn from_params(gt: &[&PoseParams], template: &BodyTemplate, camera: &Camera) -> Result<Self> {
        let b = gt.len();
        let mut joints = Vec::with_capacity(b * 3 * NUM_JOINTS);
        let mut keypoints = Vec::with_capacity(b * 2 * NUM_JOINTS);
        for p in gt {
            let j = forward_kinematics(p, template)?.joints;
            keypoints.extend(crate::camera::project(camera, &j)?.into_iter().flatten().map(|x| T::of(x as f64)));
            joints.extend(j.flat().into_iter().map(|x| T::of(x as f64)));
        }
        let cast = |v: Vec<f32>| v.into_iter().map(|x| T::of(x as f64)).collect::<Vec<T>>();
        Ok(TargetBatch {
            theta: DenseArray::matrix(b, THETA_DIM, cast(gt.iter().flat_map(|p| p.theta.clone()).collect()))?,
            beta: DenseArray::matrix(b, BETA_DIM, cast(gt.iter().flat_map(|p| p.beta.clone()).collect()))?,
            joints: DenseArray::matrix(b, 3 * NUM_JOINTS, joints)?,
            keypoints: DenseArray::matrix(b, 2 * NUM_JOINTS, keypoints)?,
        })
    }
}

/// Weighted sum of the parameter, 3D joint, and reprojection terms, each
/// averaged over the batch. Samples with a joint behind the camera drop out
/// of the reprojection term; their count is returned alongside the loss.
pub fn regressor_loss<T: Real>(
    g: &mut Graph<T>,
    template: &BodyTemplate,
    camera: &Camera,
    (theta, beta, trans): (Var, Var, Var),
    target: &TargetBatch<T>,
    weights: &LossWeights,
) -> Result<(Var, usize)> {
    let b = g.value(theta).rows();
    let inv_b = T::of(1.0 / b as f64);

    let pred = g.concat_cols(&[theta, beta])?;
    let gt_theta = g.constant(target.theta.clone());
    let gt_beta = g.constant(target.beta.clone());
    let gt = g.concat_cols(&[gt_theta, gt_beta])?;
    let l_smpl = sum_sq_diff(g, pred, gt)?;

    let joints = forward_kinematics_graph(g, template, theta, beta, trans)?;
    let gt_joints = g.constant(target.joints.clone());
    let l_joint = sum_sq_diff(g, joints, gt_joints)?;

    let jv = g.value(joints);
    let mask: Vec<T> = (0..b)
        .map(|r| {
            let ok = jv.row_slice(r).chunks(3).all(|p| p[2] > T::of(MIN_DEPTH as f64));
            if ok { T::one() } else { T::zero() }
        })
        .collect();
    let masked = mask.iter().filter(|m| m.is_zero()).count();
    let mask = g.constant(DenseArray::new(vec![b, 1], mask)?);
    let uv = project_graph(g, camera, joints, Some(mask))?;
    let gt_uv = g.constant(target.keypoints.clone());
    let r = g.sub(uv, gt_uv)?;
    let wide = g.broadcast_cols(mask, 2 * NUM_JOINTS)?;
    let r = g.mul(r, wide)?;
    let sq = g.square(r);
    let l_reproj = g.sum(sq);

    let a = g.scale(l_smpl, T::of(weights.smpl as f64) * inv_b);
    let c = g.scale(l_joint, T::of(weights.joint as f64) * inv_b);
    let d = g.scale(l_reproj, T::of(weights.reproj as f64) * inv_b);
    let ac = g.add(a, c)?;
    Ok((g.add(ac, d)?, masked))
}

fn sum_sq_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    Ok(g.sum(sq))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean loss per epoch.
    pub losses: Vec<f32>,
    /// Samples masked out of the reprojection term, summed over training.
    pub masked: usize,
}

fn shared_camera(records: &[SceneRecord]) -> Result<Camera> {
    let camera = records.first().ok_or_else(|| Error::Contract("empty training corpus".into()))?.camera;
    if records.iter().any(|r| r.camera != camera) {
        return Err(Error::Contract("training scenes must share one camera".into()));
    }
    Ok(camera)
}

pub fn train_regressor(
    records: &[SceneRecord],
    template: &BodyTemplate,
    cfg: &RegressorConfig,
    seed: u64,
) -> Result<(RegressorNet, TrainLog)> {
    cfg.validate()?;
    let camera = shared_camera(records)?;
    let mut net = RegressorNet::new(&mut substream(seed, "regressor-init", 0));
    let mut opt = Adam::new(cfg.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(seed, "regressor-shuffle", epoch as u64));
        let (mut total, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&SceneRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let gt: Vec<&PoseParams> = batch.iter().map(|r| &r.gt_params).collect();
            let target = TargetBatch::<f32>::from_params(&gt, template, &camera)?;
            let frames: Vec<BoxFrame> = batch.iter().map(|r| BoxFrame::new(r.bbox, &camera)).collect();
            let x = DenseArray::matrix(batch.len(), FEATURE_DIM, batch.iter().flat_map(|r| r.feature_vec.clone()).collect())?;

            let mut g = Graph::<f32>::new();
            let bound = net.mlp.bind(&mut g, true);
            let xv = g.constant(x);
            let out = bound.forward(&mut g, xv)?;
            let params = decode_graph(&mut g, out, &frames, &camera)?;
            let (loss, masked) = regressor_loss(&mut g, template, &camera, params, &target, &cfg.weights)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("regressor loss {value} at epoch {epoch}")));
            }
            log.masked += masked;
            total += value as f64 * batch.len() as f64;
            seen += batch.len();
            let grads = g.backward(loss)?;
            let grads = bound.grads(&g, &grads);
            opt.step(net.mlp.params_mut(), &grads)?;
        }
        let mean = (total / seen.max(1) as f64) as f32;
        log::debug!("regressor epoch {epoch}: loss {mean:.4}");
        log.losses.push(mean);
    }
    if !net.mlp.is_finite() {
        return Err(Error::Diverged("regressor weights are not finite".into()));
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_is_constant() {
        let net = RegressorNet::zeros();
        let cam = Camera::default();
        let a = net.predict(&[0.3; FEATURE_DIM], [100.0, 100.0, 200.0, 300.0], &cam).unwrap();
        let b = net.predict(&[-1.0; FEATURE_DIM], [100.0, 100.0, 200.0, 300.0], &cam).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.theta, identity_theta());
    }

    #[test]
    fn decoded_translation_follows_bbox() {
        let cam = Camera::default();
        let raw = vec![0.0; OUTPUT_DIM];
        // a 400 px box centred on the principal point sits on the optical axis
        let p = decode_output(&raw, [56.0, 56.0, 400.0, 400.0], &cam);
        assert!((p.trans[0]).abs() < 1e-6 && (p.trans[1]).abs() < 1e-6);
        assert!((p.trans[2] - 500.0 * DEPTH_SCALE / 400.0).abs() < 1e-5);
        let far = decode_output(&raw, [156.0, 156.0, 200.0, 200.0], &cam);
        assert!((far.trans[2] - 2.0 * p.trans[2]).abs() < 1e-5);
    }

    #[test]
    fn graph_decode_matches_plain() {
        let cam = Camera::default();
        let raw: Vec<f32> = (0..OUTPUT_DIM).map(|i| 0.01 * ((i * 7) % 13) as f32 - 0.05).collect();
        let bbox = [120.0, 80.0, 150.0, 260.0];
        let plain = decode_output(&raw, bbox, &cam);
        let mut g = Graph::<f64>::new();
        let out = g.constant(DenseArray::row(raw.iter().map(|&x| x as f64).collect()));
        let (t, b, tr) = decode_graph(&mut g, out, &[BoxFrame::new(bbox, &cam)], &cam).unwrap();
        for (x, y) in g.value(t).data().iter().zip(&plain.theta) {
            assert!((*x as f32 - y).abs() < 1e-6);
        }
        assert_eq!(g.value(b).data().len(), BETA_DIM);
        for (x, y) in g.value(tr).data().iter().zip(&plain.trans) {
            assert!((*x as f32 - y).abs() < 1e-4, "{x} {y}");
        }
    }

    fn loss_terms(pred: &PoseParams, gt: &PoseParams) -> [f64; 3] {
        let t = BodyTemplate::canonical();
        let cam = Camera::default();
        let target = TargetBatch::<f64>::from_params(&[gt], &t, &cam).unwrap();
        let one = |w: LossWeights| {
            let mut g = Graph::<f64>::new();
            let row = |v: &[f32]| DenseArray::row(v.iter().map(|&x| x as f64).collect());
            let vars = (g.param(row(&pred.theta)), g.param(row(&pred.beta)), g.param(row(&pred.trans)));
            let (loss, _) = regressor_loss(&mut g, &t, &cam, vars, &target, &w).unwrap();
            g.scalar_value(loss)
        };
        [
            one(LossWeights { smpl: 1.0, joint: 0.0, reproj: 0.0 }),
            one(LossWeights { smpl: 0.0, joint: 1.0, reproj: 0.0 }),
            one(LossWeights { smpl: 0.0, joint: 0.0, reproj: 1.0 }),
        ]
    }

    #[test]
    fn loss_vanishes_only_at_the_target() {
        use crate::body::tests::random_params;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut gt = random_params(&mut rng);
        gt.trans = [0.1, -0.2, 3.5];
        // Targets are stored in f32, so the f64 graph sees rounding-level residue.
        let [s, j, r] = loss_terms(&gt, &gt);
        assert!(s == 0.0 && j < 1e-9 && r < 1e-6, "{j} {r}");

        let mut moved = gt.clone();
        moved.trans[0] += 0.05;
        let [s, j, r] = loss_terms(&moved, &gt);
        assert!(s == 0.0 && j > 1e-3 && r > 1.0, "{j} {r}");

        // Rescaled 6D columns encode the same rotations: only the parameter term sees them.
        let mut scaled = gt.clone();
        for block in scaled.theta.chunks_mut(6) {
            block[..3].iter_mut().for_each(|v| *v *= 2.0);
            block[3..].iter_mut().for_each(|v| *v *= 0.5);
        }
        let [s, j, r] = loss_terms(&scaled, &gt);
        assert!(s > 0.0);
        assert!(j < 1e-9 && r < 1e-6, "{j} {r}");

        let mut shaped = gt.clone();
        shaped.beta[0] += 0.3;
        assert!(loss_terms(&shaped, &gt).iter().all(|&x| x > 0.0));
    }
}