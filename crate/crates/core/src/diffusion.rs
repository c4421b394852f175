//! Conditional diffusion refinement of `x = [θ, π]` around the regressor's
//! initial prediction.
//!
//! The network predicts the noise `ε` added to a normalized residual. The
//! score of the noised distribution is `−ε/√(1−ᾱ_t)`, so the reverse mean
//! `(x_t + β_t·score)/√α_t` is a score-ascent step of size `β_t` followed by
//! a rescale. Posterior-variance noise, scaled by `reverse_noise`, is added on
//! every step but the last; the default of 0 keeps only the score ascent.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::*;
use crate::camera::{keypoint_gradient, reprojection_loss};
use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Adam, Mlp};
use crate::rng::{substream, StageRng};
use crate::scene::{SceneRecord, FEATURE_DIM};
use crate::tensor::{DenseArray, Graph};
use crate::text::{cosine_loss_batch, CosineVariant};
use crate::vqvae::PoseVqvae;

pub const X_DIM: usize = THETA_DIM + TRANS_DIM;
pub const KEYP_DIM: usize = 3 * NUM_JOINTS;
pub const COND_DIM: usize = FEATURE_DIM + KEYP_DIM + THETA_DIM;
pub const EMBED_DIM: usize = 32;
pub const HIDDEN: usize = 512;
/// Condition scales are fitted on samples noised to at most this step.
const SCALE_FIT_STEPS: usize = 10;
const IMAGE_SEG: std::ops::Range<usize> = 0..FEATURE_DIM;
const KEYP_SEG: std::ops::Range<usize> = FEATURE_DIM..FEATURE_DIM + KEYP_DIM;
const TEXT_SEG: std::ops::Range<usize> = FEATURE_DIM + KEYP_DIM..COND_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!("invalid noise schedule: T={steps}, beta {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Schedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ` at step `t` (1-based); `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bars[t - 1] }
    }

    /// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
    pub fn q_sample(&self, x0: &[f32], eps: &[f32], t: usize) -> Vec<f32> {
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }

    /// One reverse step from `t` to `t − 1` given the predicted noise. `z`
    /// is standard normal noise, ignored at `t = 1`.
    pub fn reverse_step(&self, x_t: &[f32], eps_hat: &[f32], t: usize, z: &[f32]) -> Vec<f32> {
        let beta = self.betas[t - 1];
        let alpha = self.alphas[t - 1];
        let ab = self.alpha_bar(t);
        let coef = (beta / (1.0 - ab).sqrt()) as f32;
        let inv_sqrt_a = (1.0 / alpha.sqrt()) as f32;
        let noise_std = if t > 1 { ((1.0 - self.alpha_bar(t - 1)) / (1.0 - ab) * beta).sqrt() as f32 } else { 0.0 };
        x_t.iter()
            .zip(eps_hat)
            .zip(z)
            .map(|((x, e), n)| inv_sqrt_a * (x - coef * e) + noise_std * n)
            .collect()
    }
}

/// Which condition segments the denoiser sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mask {
    All,
    Image,
    Keypoints,
    Text,
    NoText,
    NoKeypoints,
    NoImage,
}

impl Mask {
    pub const ALL: [Mask; 7] =
        [Mask::Image, Mask::Keypoints, Mask::Text, Mask::NoKeypoints, Mask::NoText, Mask::NoImage, Mask::All];

    /// `[image, keypoints, text]` enabled flags.
    pub fn segments(self) -> [bool; 3] {
        match self {
            Mask::All => [true, true, true],
            Mask::Image => [true, false, false],
            Mask::Keypoints => [false, true, false],
            Mask::Text => [false, false, true],
            Mask::NoText => [true, true, false],
            Mask::NoKeypoints => [true, false, true],
            Mask::NoImage => [false, true, true],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mask::All => "all",
            Mask::Image => "image",
            Mask::Keypoints => "keypoints",
            Mask::Text => "text",
            Mask::NoText => "no-text",
            Mask::NoKeypoints => "no-keypoints",
            Mask::NoImage => "no-image",
        }
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mask::All, Mask::Image, Mask::Keypoints, Mask::Text, Mask::NoText, Mask::NoKeypoints, Mask::NoImage]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Std of the initial distribution around the initial prediction, in
    /// residual units.
    pub sigma: f32,
    /// Multiplier taking translation residuals (meters) to residual units.
    pub trans_scale: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    /// Probability of zeroing each condition segment (image, keypoints,
    /// text) during training.
    pub cond_dropout: [f32; 3],
    /// Residual RMS, in units of `sigma`, treated as divergence.
    pub divergence: f32,
    /// Multiplier on the reverse-step noise. 0 is the plain `Δt`-scaled
    /// score ascent; 1 is ancestral sampling.
    pub reverse_noise: f32,
    pub cosine: CosineVariant,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: 2.0,
            trans_scale: 4.0,
            epochs: 40,
            batch: 128,
            lr: 1e-3,
            cond_dropout: [0.15, 0.15, 0.5],
            divergence: 10.0,
            reverse_noise: 0.0,
            cosine: CosineVariant::NegCos,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)?;
        if !(self.sigma > 0.0) || !(self.trans_scale > 0.0) || !(self.divergence > 0.0) || !(self.reverse_noise >= 0.0) {
            return Err(Error::Config("sigma, trans_scale and divergence must be positive, reverse_noise non-negative".into()));
        }
        if self.batch == 0 || !(self.lr > 0.0) || !self.cond_dropout.iter().all(|p| (0.0..1.0).contains(p)) {
            return Err(Error::Config(format!("invalid diffusion training settings {self:?}")));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Trained noise predictor plus the constants needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub net: Mlp,
    /// Per-feature condition scale; conditions enter as `asinh(c / scale)`,
    /// so zeroed segments stay zero.
    pub cond_scale: Vec<f32>,
    pub cfg: DiffusionConfig,
}

/// Frozen models the condition is computed from.
pub struct Guide<'a> {
    pub template: &'a BodyTemplate,
    pub vq: &'a PoseVqvae,
    pub cosine: CosineVariant,
}

/// A scene prepared for refinement.
#[derive(Clone, Debug)]
pub struct SceneCtx<'a> {
    pub record: &'a SceneRecord,
    /// Center of the initial distribution.
    pub init: PoseParams,
    /// Text latent of the scene's description.
    pub z_text: Vec<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineFlags {
    pub diverged: bool,
    /// Steps where a joint fell behind the camera and the keypoint gradient was zeroed.
    pub behind_camera: u32,
    /// Steps where a decoded 6D block was degenerate and replaced.
    pub degenerate: u32,
    /// Steps where a latent had zero norm in the text term.
    pub text_degenerate: u32,
}

impl RefineFlags {
    pub fn any(&self) -> bool {
        self.diverged || self.behind_camera > 0 || self.degenerate > 0 || self.text_degenerate > 0
    }
}

/// Residual in normalized units to parameters; β comes from `init` unchanged.
pub fn decode_residual(init: &PoseParams, n: &[f32], cfg: &DiffusionConfig, flags: &mut RefineFlags) -> PoseParams {
    let mut theta: Vec<f32> = init.theta.iter().zip(&n[..THETA_DIM]).map(|(a, d)| a + cfg.sigma * d).collect();
    let mut replaced = false;
    for j in 0..NUM_JOINTS {
        let block = &mut theta[6 * j..6 * j + 6];
        if !is_well_conditioned_6d(block) {
            block.copy_from_slice(init.block(j));
            replaced = true;
        }
    }
    if replaced {
        flags.degenerate += 1;
    }
    let s = cfg.sigma / cfg.trans_scale;
    let d = &n[THETA_DIM..];
    let trans = [init.trans[0] + s * d[0], init.trans[1] + s * d[1], init.trans[2] + s * d[2]];
    PoseParams { theta, beta: init.beta.clone(), trans }
}

/// Parameters to a residual in normalized units.
pub fn encode_residual(init: &PoseParams, target: &PoseParams, cfg: &DiffusionConfig) -> Vec<f32> {
    let mut n: Vec<f32> = target.theta.iter().zip(&init.theta).map(|(a, b)| (a - b) / cfg.sigma).collect();
    let s = cfg.trans_scale / cfg.sigma;
    n.extend((0..3).map(|k| (target.trans[k] - init.trans[k]) * s));
    n
}

/// Raw condition rows `[B×280]` at the decoded poses, with masked segments
/// zeroed. Also returns each pose's reprojection loss (infinite when a joint
/// is behind the camera).
pub fn build_conditions(
    scenes: &[&SceneCtx],
    decoded: &[PoseParams],
    mask: Mask,
    guide: &Guide,
    flags: &mut [RefineFlags],
) -> Result<(DenseArray<f32>, Vec<f32>)> {
    let b = scenes.len();
    let [use_img, use_kp, use_text] = mask.segments();
    let mut c = vec![0.0f32; b * COND_DIM];
    let mut reproj = vec![f32::INFINITY; b];
    let keyp: Vec<Result<Option<(Vec<[f32; 3]>, f32)>>> = scenes
        .par_iter()
        .zip(decoded.par_iter())
        .map(|(s, p)| {
            let joints = forward_kinematics(p, guide.template)?.joints;
            let r = &s.record;
            match keypoint_gradient(&r.camera, &joints, &r.obs_keypoints) {
                Ok(gk) => Ok(Some((gk, reprojection_loss(&r.camera, &joints, &r.obs_keypoints)?))),
                Err(Error::BehindCamera { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    for (i, k) in keyp.into_iter().enumerate() {
        let row = &mut c[i * COND_DIM..(i + 1) * COND_DIM];
        if use_img {
            row[IMAGE_SEG].copy_from_slice(&scenes[i].record.feature_vec);
        }
        match k? {
            Some((gk, loss)) => {
                reproj[i] = loss;
                if use_kp {
                    row[KEYP_SEG].copy_from_slice(&gk.iter().flatten().copied().collect::<Vec<_>>());
                }
            }
            None => flags[i].behind_camera += 1,
        }
    }
    if use_text {
        let theta = DenseArray::matrix(b, THETA_DIM, decoded.iter().flat_map(|p| p.theta.iter().copied()).collect())?;
        let zt = DenseArray::matrix(b, crate::vqvae::LATENT_DIM, scenes.iter().flat_map(|s| s.z_text.iter().copied()).collect())?;
        for (i, out) in cosine_loss_batch(guide.vq, &theta, &zt, guide.cosine)?.into_iter().enumerate() {
            if out.degenerate {
                flags[i].text_degenerate += 1;
            } else {
                c[i * COND_DIM + TEXT_SEG.start..(i + 1) * COND_DIM].copy_from_slice(&out.grad);
            }
        }
    }
    Ok((DenseArray::matrix(b, COND_DIM, c)?, reproj))
}

impl Denoiser {
    pub fn input_dim() -> usize {
        X_DIM + COND_DIM + EMBED_DIM
    }

    fn new<R: Rng + ?Sized>(cfg: &DiffusionConfig, cond_scale: Vec<f32>, rng: &mut R) -> Self {
        let mut net = Mlp::new(&[Self::input_dim(), HIDDEN, HIDDEN, X_DIM], rng);
        net.scale_last(0.1);
        Denoiser { net, cond_scale, cfg: cfg.clone() }
    }

    /// Network input rows `[n_t, asinh(c / scale), emb(t)]`.
    pub fn inputs(&self, n: &[Vec<f32>], cond: &DenseArray<f32>, t: &[usize]) -> Result<DenseArray<f32>> {
        let mut data = Vec::with_capacity(n.len() * Self::input_dim());
        for (i, x) in n.iter().enumerate() {
            data.extend_from_slice(x);
            data.extend(cond.row_slice(i).iter().zip(&self.cond_scale).map(|(c, s)| (c / s).asinh()));
            data.extend(timestep_embedding(t[i], EMBED_DIM));
        }
        DenseArray::matrix(n.len(), Self::input_dim(), data)
    }

    pub fn predict_eps(&self, n: &[Vec<f32>], cond: &DenseArray<f32>, t: &[usize]) -> Result<DenseArray<f32>> {
        self.net.infer(&self.inputs(n, cond, t)?)
    }

    pub fn is_finite(&self) -> bool {
        self.net.is_finite() && self.cond_scale.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// A noise predictor used by the reverse chain.
pub trait EpsModel {
    fn predict(&self, n: &[Vec<f32>], cond: &DenseArray<f32>, t: &[usize]) -> Result<DenseArray<f32>>;
}

impl EpsModel for Denoiser {
    fn predict(&self, n: &[Vec<f32>], cond: &DenseArray<f32>, t: &[usize]) -> Result<DenseArray<f32>> {
        self.predict_eps(n, cond, t)
    }
}

/// Always predicts zero noise.
pub struct ZeroEps;

impl EpsModel for ZeroEps {
    fn predict(&self, n: &[Vec<f32>], _cond: &DenseArray<f32>, _t: &[usize]) -> Result<DenseArray<f32>> {
        Ok(DenseArray::zeros(&[n.len(), X_DIM]))
    }
}

#[derive(Clone, Debug)]
pub struct RefineResult {
    pub params: PoseParams,
    pub flags: RefineFlags,
    /// Normalized residual after each step, starting with `x_T`.
    pub trajectory: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug)]
pub struct RefineOptions {
    pub mask: Mask,
    pub seed: u64,
    pub keep_trajectory: bool,
    /// Start the chain at this step from the given residuals instead of at
    /// `T` from `N(0, I)`.
    pub start: Option<(usize, Vec<Vec<f32>>)>,
}

impl RefineOptions {
    pub fn new(mask: Mask, seed: u64) -> Self {
        RefineOptions { mask, seed, keep_trajectory: false, start: None }
    }
}

fn normal_vec(rng: &mut StageRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Runs the reverse chain for a batch of scenes. Each scene draws its noise
/// from its own stream keyed by `(seed, scene id)`, so results do not depend
/// on how scenes are batched.
pub fn refine_batch(
    scenes: &[&SceneCtx],
    model: &dyn EpsModel,
    cfg: &DiffusionConfig,
    guide: &Guide,
    opts: &RefineOptions,
) -> Result<Vec<RefineResult>> {
    let schedule = cfg.schedule()?;
    let b = scenes.len();
    let mut rngs: Vec<StageRng> = scenes.iter().map(|s| substream(opts.seed, "refine", s.record.id)).collect();
    let (t_start, mut n): (usize, Vec<Vec<f32>>) = match &opts.start {
        Some((t, xs)) => (*t, xs.clone()),
        None => (schedule.steps(), rngs.iter_mut().map(|r| normal_vec(r, X_DIM)).collect()),
    };
    if n.len() != b || n.iter().any(|x| x.len() != X_DIM) {
        return Err(Error::shape("refine", "start residuals do not match the scene batch"));
    }
    let mut flags = vec![RefineFlags::default(); b];
    let mut active = vec![true; b];
    let mut best: Vec<(f32, PoseParams)> = scenes.iter().map(|s| (f32::INFINITY, s.init.clone())).collect();
    let mut traj: Vec<Vec<Vec<f32>>> = if opts.keep_trajectory { n.iter().map(|x| vec![x.clone()]).collect() } else { Vec::new() };

    for t in (1..=t_start).rev() {
        let idx: Vec<usize> = (0..b).filter(|&i| active[i]).collect();
        if idx.is_empty() {
            break;
        }
        let sub: Vec<&SceneCtx> = idx.iter().map(|&i| scenes[i]).collect();
        let mut sub_flags: Vec<RefineFlags> = idx.iter().map(|&i| flags[i]).collect();
        let decoded: Vec<PoseParams> =
            idx.iter().zip(sub_flags.iter_mut()).map(|(&i, f)| decode_residual(&scenes[i].init, &n[i], cfg, f)).collect();
        let (cond, reproj) = build_conditions(&sub, &decoded, opts.mask, guide, &mut sub_flags)?;
        let xs: Vec<Vec<f32>> = idx.iter().map(|&i| n[i].clone()).collect();
        let eps = model.predict(&xs, &cond, &vec![t; idx.len()])?;
        for (k, &i) in idx.iter().enumerate() {
            flags[i] = sub_flags[k];
            if reproj[k] < best[i].0 {
                best[i] = (reproj[k], decoded[k].clone());
            }
            let z: Vec<f32> = normal_vec(&mut rngs[i], X_DIM).into_iter().map(|v| v * cfg.reverse_noise).collect();
            n[i] = schedule.reverse_step(&n[i], eps.row_slice(k), t, &z);
            if opts.keep_trajectory {
                traj[i].push(n[i].clone());
            }
            let rms = (n[i].iter().map(|x| x * x).sum::<f32>() / X_DIM as f32).sqrt();
            if !rms.is_finite() || rms > cfg.divergence {
                flags[i].diverged = true;
                active[i] = false;
            }
        }
    }

    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut f = flags[i];
        let params = if f.diverged {
            best[i].1.clone()
        } else {
            decode_residual(&scenes[i].init, &n[i], cfg, &mut f)
        };
        out.push(RefineResult {
            params,
            flags: f,
            trajectory: if opts.keep_trajectory { Some(std::mem::take(&mut traj[i])) } else { None },
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub losses: Vec<f32>,
}

fn fit_condition_scale(scenes: &[SceneCtx], cfg: &DiffusionConfig, schedule: &Schedule, guide: &Guide, seed: u64) -> Result<Vec<f32>> {
    let mut rng = substream(seed, "diffusion-scale", 0);
    let mut cols: Vec<Vec<f32>> = vec![Vec::new(); COND_DIM];
    for chunk in scenes.chunks(256) {
        let refs: Vec<&SceneCtx> = chunk.iter().collect();
        let mut flags = vec![RefineFlags::default(); chunk.len()];
        let decoded: Vec<PoseParams> = chunk
            .iter()
            .zip(flags.iter_mut())
            .map(|(s, f)| {
                let n0 = encode_residual(&s.init, &s.record.gt_params, cfg);
                let t = rng.random_range(1..=SCALE_FIT_STEPS.min(schedule.steps()));
                let eps = normal_vec(&mut rng, X_DIM);
                decode_residual(&s.init, &schedule.q_sample(&n0, &eps, t), cfg, f)
            })
            .collect();
        let (c, _) = build_conditions(&refs, &decoded, Mask::All, guide, &mut flags)?;
        for r in 0..c.rows() {
            for (col, x) in cols.iter_mut().zip(c.row_slice(r)) {
                if *x != 0.0 {
                    col.push(x.abs());
                }
            }
        }
    }
    // median magnitude near the data: gradients at heavily noised poses are
    // orders of magnitude larger and would squash the informative ones
    Ok(cols
        .into_iter()
        .map(|mut col| {
            if col.is_empty() {
                return 1.0;
            }
            let mid = col.len() / 2;
            let (_, m, _) = col.select_nth_unstable_by(mid, f32::total_cmp);
            m.max(1e-6)
        })
        .collect())
}

/// ε-prediction training on residuals between ground truth and the initial
/// prediction. Each sample's condition is built at its noised pose; each
/// condition segment is dropped independently with `cond_dropout`.
pub fn train_diffusion(scenes: &[SceneCtx], cfg: &DiffusionConfig, guide: &Guide, seed: u64) -> Result<(Denoiser, DiffusionReport)> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("no diffusion training scenes".into()));
    }
    let schedule = cfg.schedule()?;
    let scale = fit_condition_scale(scenes, cfg, &schedule, guide, seed)?;
    let mut model = Denoiser::new(cfg, scale, &mut substream(seed, "diffusion-init", 0));
    let residuals: Vec<Vec<f32>> = scenes.iter().map(|s| encode_residual(&s.init, &s.record.gt_params, cfg)).collect();
    let mut opt = Adam::new(cfg.lr);
    let mut report = DiffusionReport::default();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        // cosine decay; a constant rate leaves the ε estimate too noisy for a
        // 100-step chain
        opt.lr = cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * epoch as f32 / cfg.epochs as f32).cos());
        let mut rng = substream(seed, "diffusion-train", epoch as u64);
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let refs: Vec<&SceneCtx> = chunk.iter().map(|&i| &scenes[i]).collect();
            let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let eps: Vec<Vec<f32>> = (0..b).map(|_| normal_vec(&mut rng, X_DIM)).collect();
            let drops: Vec<[bool; 3]> = (0..b).map(|_| cfg.cond_dropout.map(|p| rng.random::<f32>() < p)).collect();
            let noised: Vec<Vec<f32>> = chunk.iter().zip(&eps).zip(&ts).map(|((&i, e), &t)| schedule.q_sample(&residuals[i], e, t)).collect();
            let mut flags = vec![RefineFlags::default(); b];
            let decoded: Vec<PoseParams> =
                refs.iter().zip(&noised).zip(flags.iter_mut()).map(|((s, n), f)| decode_residual(&s.init, n, cfg, f)).collect();
            let (mut cond, _) = build_conditions(&refs, &decoded, Mask::All, guide, &mut flags)?;
            for (r, d) in drops.iter().enumerate() {
                let row = &mut cond.data_mut()[r * COND_DIM..(r + 1) * COND_DIM];
                for (seg, &drop) in [IMAGE_SEG, KEYP_SEG, TEXT_SEG].into_iter().zip(d) {
                    if drop {
                        row[seg].fill(0.0);
                    }
                }
            }
            let x = model.inputs(&noised, &cond, &ts)?;
            let target = DenseArray::matrix(b, X_DIM, eps.into_iter().flatten().collect())?;

            let mut g = Graph::<f32>::new();
            let bound = model.net.bind(&mut g, true);
            let xv = g.constant(x);
            let pred = bound.forward(&mut g, xv)?;
            let tv = g.constant(target);
            let d = g.sub(pred, tv)?;
            let sq = g.square(d);
            let loss = g.mean(sq);
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("diffusion loss {value} at epoch {epoch}")));
            }
            total += value as f64 * b as f64;
            seen += b;
            let grads = g.backward(loss)?;
            let grads = bound.grads(&g, &grads);
            opt.step(model.net.params_mut(), &grads)?;
        }
        let mean = (total / seen.max(1) as f64) as f32;
        log::debug!("diffusion epoch {epoch}: loss {mean:.4}");
        report.losses.push(mean);
    }
    if !model.is_finite() {
        return Err(Error::Diverged("denoiser weights are not finite".into()));
    }
    Ok((model, report))
}

/// Outcome of the one-dimensional Gaussian sanity check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarnessResult {
    pub sample_mean: f64,
    pub sample_std: f64,
}

/// Trains a small unconditional denoiser on `x ~ N(target_mean, spread²)`
/// around an initial value of 0, then draws `samples` refined values with the
/// same schedule, reverse step and reverse noise as the pose model.
pub fn gaussian_harness(target_mean: f32, spread: f32, sigma: f32, samples: usize, seed: u64) -> Result<HarnessResult> {
    let cfg = DiffusionConfig::default();
    let schedule = cfg.schedule()?;
    let mut rng = substream(seed, "harness", 0);
    let mut net = Mlp::new(&[1 + EMBED_DIM, 64, 64, 1], &mut rng);
    let mut opt = Adam::new(2e-3);
    let batch = 256;
    for _ in 0..3000 {
        let mut x = Vec::with_capacity(batch * (1 + EMBED_DIM));
        let mut target = Vec::with_capacity(batch);
        for _ in 0..batch {
            let x0 = (target_mean + spread * rng.sample::<f32, _>(StandardNormal)) / sigma;
            let t = rng.random_range(1..=schedule.steps());
            let e: f32 = rng.sample(StandardNormal);
            x.push(schedule.q_sample(&[x0], &[e], t)[0]);
            x.extend(timestep_embedding(t, EMBED_DIM));
            target.push(e);
        }
        let mut g = Graph::<f32>::new();
        let bound = net.bind(&mut g, true);
        let xv = g.constant(DenseArray::matrix(batch, 1 + EMBED_DIM, x)?);
        let pred = bound.forward(&mut g, xv)?;
        let tv = g.constant(DenseArray::matrix(batch, 1, target)?);
        let d = g.sub(pred, tv)?;
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss)?;
        let grads = bound.grads(&g, &grads);
        opt.step(net.params_mut(), &grads)?;
    }
    let mut xs: Vec<f32> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
    for t in (1..=schedule.steps()).rev() {
        let mut input = Vec::with_capacity(samples * (1 + EMBED_DIM));
        for &x in &xs {
            input.push(x);
            input.extend(timestep_embedding(t, EMBED_DIM));
        }
        let eps = net.infer(&DenseArray::matrix(samples, 1 + EMBED_DIM, input)?)?;
        for (i, x) in xs.iter_mut().enumerate() {
            let z: f32 = cfg.reverse_noise * rng.sample::<f32, _>(StandardNormal);
            *x = schedule.reverse_step(&[*x], &[eps.data()[i]], t, &[z])[0];
        }
    }
    let vals: Vec<f64> = xs.iter().map(|&x| (x * sigma) as f64).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    Ok(HarnessResult { sample_mean: mean, sample_std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.steps(), 100);
        assert!((s.betas[0] - 1e-4).abs() < 1e-15 && (s.betas[99] - 0.02).abs() < 1e-15);
        assert!(s.betas.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(Schedule::linear(0, 1e-4, 0.02).is_err());
        assert!(Schedule::linear(10, 0.5, 1.5).is_err());
    }

    #[test]
    fn reverse_step_inverts_known_noise() {
        // with the true noise, the deterministic mean step recovers x_{t-1}'s mean
        let s = Schedule::linear(100, 1e-4, 0.02).unwrap();
        let x0 = [0.7f32, -0.3];
        let eps = [0.2f32, 1.1];
        let t = 1;
        let xt = s.q_sample(&x0, &eps, t);
        let back = s.reverse_step(&xt, &eps, t, &[0.0, 0.0]);
        for (a, b) in back.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn masks_parse_and_cover_segments() {
        for m in Mask::ALL {
            assert_eq!(m.name().parse::<Mask>().unwrap(), m);
        }
        assert!("bogus".parse::<Mask>().is_err());
        assert_eq!(Mask::Image.segments(), [true, false, false]);
        assert_eq!(Mask::NoText.segments(), [true, true, false]);
    }

    #[test]
    fn residual_round_trip() {
        let cfg = DiffusionConfig::default();
        let init = PoseParams::rest([0.1, -0.2, 3.0]);
        let mut target = init.clone();
        target.theta[3] += 0.2;
        target.trans[2] += 0.4;
        let n = encode_residual(&init, &target, &cfg);
        let mut flags = RefineFlags::default();
        let back = decode_residual(&init, &n, &cfg, &mut flags);
        for (a, b) in back.theta.iter().zip(&target.theta) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((back.trans[2] - target.trans[2]).abs() < 1e-6);
        assert_eq!(back.beta, init.beta);
        assert!(!flags.any());
    }

    #[test]
    fn degenerate_blocks_fall_back_to_init() {
        let cfg = DiffusionConfig::default();
        let init = PoseParams::rest([0.0, 0.0, 3.0]);
        let mut n = vec![0.0f32; X_DIM];
        // cancel the first column of joint 2 exactly
        n[12] = -1.0 / cfg.sigma;
        let mut flags = RefineFlags::default();
        let p = decode_residual(&init, &n, &cfg, &mut flags);
        assert_eq!(p.block(2), init.block(2));
        assert_eq!(flags.degenerate, 1);
    }
}
