//! Central finite-difference checks in double precision. Each check returns
//! the worst norm-wise relative error over its random instances.

use rand::Rng;
use rand_distr::StandardNormal;

use vlfa::body::{forward_kinematics, BodyTemplate, PoseParams, BETA_DIM, THETA_DIM};
use vlfa::camera::{keypoint_gradient, Camera, Keypoints2D};
use vlfa::nn::{BoundMlp, Mlp};
use vlfa::regressor::{regressor_loss, LossWeights, TargetBatch};
use vlfa::rng::{substream, StageRng};
use vlfa::scene::{sample_pose, vocab_size, RngNoise};
use vlfa::tensor::{DenseArray, Graph, Var};
use vlfa::text::{align_objective, cosine_loss_batch, cosine_loss_graph, pooling_matrix, CosineVariant, TextEncoder};
use vlfa::vqvae::{vq_loss_graph, PoseVqvae, LATENT_DIM};

pub const INSTANCES: usize = 100;
pub const TOLERANCE: f64 = 1e-3;
const H: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradStats {
    pub instances: usize,
    pub max_rel: f64,
}

impl GradStats {
    fn new() -> Self {
        GradStats { instances: 0, max_rel: 0.0 }
    }

    fn push(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.instances += 1;
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
    }

    pub fn passes(&self) -> bool {
        self.instances >= INSTANCES && self.max_rel < TOLERANCE
    }
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn central(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Derivative along `dir` at `x`.
fn directional(x: &[f64], dir: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let at = |s: f64| x.iter().zip(dir).map(|(a, d)| a + s * d).collect::<Vec<_>>();
    (f(&at(H)) - f(&at(-H))) / (2.0 * H)
}

fn normal(rng: &mut StageRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random unit direction, so the finite-difference step stays `H` long
/// however many weights it spans.
fn unit(rng: &mut StageRng, n: usize) -> Vec<f64> {
    let v = normal(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn mlp_values(m: &Mlp) -> Vec<f64> {
    m.params().iter().flat_map(|p| f64s(p.data())).collect()
}

/// Splits flat values back into `m`'s parameter shapes.
fn shaped(m: &Mlp, flat: &[f64]) -> Vec<DenseArray<f64>> {
    let mut off = 0;
    m.params()
        .iter()
        .map(|p| {
            let n = p.numel();
            off += n;
            DenseArray::new(p.shape().to_vec(), flat[off - n..off].to_vec()).unwrap()
        })
        .collect()
}

/// Random biases, so no hidden unit sits exactly on its ReLU kink as it
/// does at zero-bias initialization.
fn jitter_biases(m: &mut Mlp, rng: &mut StageRng) {
    for l in &mut m.layers {
        for b in l.bias.data_mut() {
            *b += 0.1 * rng.sample::<f32, _>(StandardNormal);
        }
    }
}

/// Untrained codebook model at a generic point: random codes and biases.
fn random_vq(rng: &mut StageRng) -> PoseVqvae {
    let mut vq = PoseVqvae::new(32, 0.25, rng);
    for c in vq.codebook.data_mut() {
        *c = rng.sample(StandardNormal);
    }
    jitter_biases(&mut vq.encoder, rng);
    jitter_biases(&mut vq.decoder, rng);
    vq
}

fn grad_of(g: &Graph<f64>, loss: Var, vars: &[Var]) -> Vec<f64> {
    let grads = g.backward(loss).unwrap();
    vars.iter().flat_map(|&v| grads.wrt(g, v).into_data()).collect()
}

/// Camera-frame keypoint gradient against the reprojection loss evaluated in
/// `f64` from the projection formula.
pub fn keypoint_gradient_check() -> GradStats {
    let template = BodyTemplate::canonical();
    let camera = Camera::default();
    let mut rng = substream(1, "gradcheck-keyp", 0);
    let mut stats = GradStats::new();
    while stats.instances < INSTANCES {
        let pose = sample_pose(&mut RngNoise(&mut rng));
        let joints = forward_kinematics(&pose, &template).unwrap().joints;
        let uv: Vec<[f32; 2]> = vlfa::camera::project(&camera, &joints)
            .unwrap()
            .iter()
            .map(|p| [p[0] + 8.0 * rng.sample::<f32, _>(StandardNormal), p[1] + 8.0 * rng.sample::<f32, _>(StandardNormal)])
            .collect();
        let confidence: Vec<f32> = (0..uv.len()).map(|_| if rng.random::<f32>() < 0.15 { 0.0 } else { rng.random() }).collect();
        let obs = Keypoints2D { uv, confidence };
        let analytic: Vec<f64> = keypoint_gradient(&camera, &joints, &obs).unwrap().iter().flatten().map(|&x| x as f64).collect();
        let x: Vec<f64> = joints.positions.iter().flatten().map(|&v| v as f64).collect();
        let numeric = central(&x, |p| {
            let (f, c) = (camera.focal as f64, [camera.principal[0] as f64, camera.principal[1] as f64]);
            p.chunks(3)
                .zip(&obs.uv)
                .zip(&obs.confidence)
                .map(|((j, o), &w)| {
                    let du = f * j[0] / j[2] + c[0] - o[0] as f64;
                    let dv = f * j[1] / j[2] + c[1] - o[1] as f64;
                    (w as f64).powi(2) * (du * du + dv * dv)
                })
                .sum()
        });
        stats.push(&analytic, &numeric);
    }
    stats
}

/// Parameter, joint and reprojection loss of the regressor with respect to
/// `(θ, β, π)`.
pub fn regressor_loss_check() -> GradStats {
    let template = BodyTemplate::canonical();
    let camera = Camera::default();
    let weights = LossWeights::default();
    let mut rng = substream(2, "gradcheck-regressor", 0);
    let mut stats = GradStats::new();
    while stats.instances < INSTANCES {
        let gt = sample_pose(&mut RngNoise(&mut rng));
        let target = TargetBatch::<f64>::from_params(&[&gt], &template, &camera).unwrap();
        let mut x = f64s(&gt.theta);
        x.extend(f64s(&gt.beta));
        x.extend(f64s(&gt.trans));
        for (v, n) in x.iter_mut().zip(normal(&mut rng, THETA_DIM + BETA_DIM + 3, 0.1)) {
            *v += n;
        }
        let build = |p: &[f64], g: &mut Graph<f64>| {
            let theta = g.param(DenseArray::matrix(1, THETA_DIM, p[..THETA_DIM].to_vec()).unwrap());
            let beta = g.param(DenseArray::matrix(1, BETA_DIM, p[THETA_DIM..THETA_DIM + BETA_DIM].to_vec()).unwrap());
            let trans = g.param(DenseArray::matrix(1, 3, p[THETA_DIM + BETA_DIM..].to_vec()).unwrap());
            let (loss, _) = regressor_loss(g, &template, &camera, (theta, beta, trans), &target, &weights).unwrap();
            (loss, [theta, beta, trans])
        };
        let mut g = Graph::new();
        let (loss, vars) = build(&x, &mut g);
        let analytic = grad_of(&g, loss, &vars);
        let numeric = central(&x, |p| {
            let mut g = Graph::new();
            let (loss, _) = build(p, &mut g);
            g.scalar_value(loss)
        });
        stats.push(&analytic, &numeric);
    }
    stats
}

fn pose_batch(rng: &mut StageRng, b: usize) -> DenseArray<f64> {
    let data = (0..b).flat_map(|_| f64s(&sample_pose(&mut RngNoise(&mut *rng)).theta)).collect();
    DenseArray::matrix(b, THETA_DIM, data).unwrap()
}

/// Commitment plus straight-through reconstruction loss, with the quantized
/// targets and shift held at their values at the base point. Checks every
/// pose coordinate and one random direction through all weights.
pub fn vq_loss_check() -> GradStats {
    let mut rng = substream(3, "gradcheck-vq", 0);
    let mut stats = GradStats::new();
    while stats.instances < INSTANCES {
        let vq = random_vq(&mut rng);
        let theta = pose_batch(&mut rng, 2);
        let z = vq.encode(&theta.cast()).unwrap();
        let (_, q) = vq.quantize_batch(&z).unwrap();
        let shift: Vec<f64> = q.data().iter().zip(z.data()).map(|(a, b)| (a - b) as f64).collect();
        let shift = DenseArray::new(z.shape().to_vec(), shift).unwrap();
        let q = q.cast::<f64>();
        let n_enc = mlp_values(&vq.encoder).len();
        let mut x = theta.data().to_vec();
        x.extend(mlp_values(&vq.encoder));
        x.extend(mlp_values(&vq.decoder));
        let build = |p: &[f64], g: &mut Graph<f64>| {
            let n = theta.numel();
            let th = g.param(DenseArray::new(theta.shape().to_vec(), p[..n].to_vec()).unwrap());
            let enc = BoundMlp::from_values(g, shaped(&vq.encoder, &p[n..n + n_enc])).unwrap();
            let dec = BoundMlp::from_values(g, shaped(&vq.decoder, &p[n + n_enc..])).unwrap();
            let loss = vq_loss_graph(g, &enc, &dec, th, &q, vq.alpha, Some(&shift)).unwrap();
            let mut vars = vec![th];
            vars.extend(enc.vars());
            vars.extend(dec.vars());
            (loss, vars)
        };
        let mut g = Graph::new();
        let (loss, vars) = build(&x, &mut g);
        let full = grad_of(&g, loss, &vars);
        let eval = |p: &[f64]| {
            let mut g = Graph::new();
            let (loss, _) = build(p, &mut g);
            g.scalar_value(loss)
        };
        let n = theta.numel();
        let mut analytic = full[..n].to_vec();
        let mut numeric = central(&x[..n], |p| {
            let mut y = x.clone();
            y[..n].copy_from_slice(p);
            eval(&y)
        });
        let mut dir = vec![0.0; n];
        dir.extend(unit(&mut rng, x.len() - n));
        analytic.push(full.iter().zip(&dir).map(|(a, d)| a * d).sum());
        numeric.push(directional(&x, &dir, eval));
        stats.push(&analytic, &numeric);
    }
    stats
}

/// Contrastive plus reconstruction alignment loss: every coordinate of the
/// text latents, and one random direction through the token table and
/// projection weights.
pub fn align_loss_check() -> GradStats {
    let mut rng = substream(4, "gradcheck-align", 0);
    let mut stats = GradStats::new();
    let vocab = vocab_size();
    while stats.instances < INSTANCES {
        let b = 4;
        let vq = random_vq(&mut rng);
        let mut text = TextEncoder::new(vocab, 0.07, &mut rng);
        jitter_biases(&mut text.proj, &mut rng);
        let symmetric = stats.instances % 2 == 1;
        let theta = pose_batch(&mut rng, b);
        let z_pose = vq.encoder.infer(&theta.cast()).unwrap().cast::<f64>();
        let tokens: Vec<Vec<u32>> = (0..b).map(|_| (0..5).map(|_| rng.random_range(0..vocab as u32)).collect()).collect();
        let lists: Vec<&[u32]> = tokens.iter().map(|t| t.as_slice()).collect();
        let pool = pooling_matrix::<f64>(&lists, vocab).unwrap();
        let dec_values: Vec<DenseArray<f64>> = vq.decoder.params().iter().map(|p| p.cast()).collect();
        let objective = |g: &mut Graph<f64>, z: Var| {
            let dec = BoundMlp::from_values(g, dec_values.clone()).unwrap();
            align_objective(g, z, &dec, &theta, Some(&z_pose), text.tau, symmetric).unwrap()
        };

        let z0 = text.embed_batch(&lists).unwrap();
        let x = f64s(z0.data());
        let latent = |p: &[f64], g: &mut Graph<f64>| g.param(DenseArray::matrix(b, LATENT_DIM, p.to_vec()).unwrap());
        let mut g = Graph::new();
        let z = latent(&x, &mut g);
        let loss = objective(&mut g, z);
        let mut analytic = grad_of(&g, loss, &[z]);
        let mut numeric = central(&x, |p| {
            let mut g = Graph::new();
            let z = latent(p, &mut g);
            let loss = objective(&mut g, z);
            g.scalar_value(loss)
        });

        let n_table = text.token_table.numel();
        let mut w = f64s(text.token_table.data());
        w.extend(mlp_values(&text.proj));
        let upstream = |p: &[f64], g: &mut Graph<f64>| {
            let table = g.param(DenseArray::new(text.token_table.shape().to_vec(), p[..n_table].to_vec()).unwrap());
            let proj = BoundMlp::from_values(g, shaped(&text.proj, &p[n_table..])).unwrap();
            let pc = g.constant(pool.clone());
            let pooled = g.matmul(pc, table).unwrap();
            let z = proj.forward(g, pooled).unwrap();
            let mut vars = vec![table];
            vars.extend(proj.vars());
            (objective(g, z), vars)
        };
        let mut g = Graph::new();
        let (loss, vars) = upstream(&w, &mut g);
        let full = grad_of(&g, loss, &vars);
        let dir = unit(&mut rng, w.len());
        analytic.push(full.iter().zip(&dir).map(|(a, d)| a * d).sum());
        numeric.push(directional(&w, &dir, |p| {
            let mut g = Graph::new();
            let (loss, _) = upstream(p, &mut g);
            g.scalar_value(loss)
        }));
        stats.push(&analytic, &numeric);
    }
    stats
}

/// Text-similarity guidance loss with respect to `θ`, for both the
/// hand-derived `f32` gradient and the graph's.
pub fn cosine_loss_check() -> GradStats {
    let mut rng = substream(5, "gradcheck-cosine", 0);
    let mut stats = GradStats::new();
    while stats.instances < INSTANCES {
        let vq = random_vq(&mut rng);
        let variant = if stats.instances % 2 == 0 { CosineVariant::NegCos } else { CosineVariant::CosSquared };
        let pose: PoseParams = sample_pose(&mut RngNoise(&mut rng));
        let x = f64s(&pose.theta);
        let zt = DenseArray::matrix(1, LATENT_DIM, normal(&mut rng, LATENT_DIM, 1.0)).unwrap();
        let eval = |p: &[f64], g: &mut Graph<f64>| {
            let th = g.param(DenseArray::matrix(1, THETA_DIM, p.to_vec()).unwrap());
            (cosine_loss_graph(g, &vq, th, &zt, variant).unwrap(), th)
        };
        let numeric = central(&x, |p| {
            let mut g = Graph::new();
            let (loss, _) = eval(p, &mut g);
            g.scalar_value(loss)
        });
        let mut g = Graph::new();
        let (loss, th) = eval(&x, &mut g);
        stats.push(&grad_of(&g, loss, &[th]), &numeric);
        let hand = cosine_loss_batch(&vq, &DenseArray::row(pose.theta.clone()), &zt.cast(), variant).unwrap().remove(0);
        assert!(!hand.degenerate);
        stats.max_rel = stats.max_rel.max(rel_err(&f64s(&hand.grad), &numeric));
    }
    stats
}

/// All five checks, named.
pub fn all_checks() -> Vec<(&'static str, GradStats)> {
    vec![
        ("keypoint gradient", keypoint_gradient_check()),
        ("regressor loss", regressor_loss_check()),
        ("codebook loss", vq_loss_check()),
        ("alignment loss", align_loss_check()),
        ("text guidance loss", cosine_loss_check()),
    ]
}
