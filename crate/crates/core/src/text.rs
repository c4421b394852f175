//! Text branch: pooled token embeddings projected into the pose latent
//! space, contrastive alignment against the frozen pose encoder, and the
//! pose-text cosine guidance loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::THETA_DIM;
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp};
use crate::rng::substream;
use crate::scene::{vocab_size, SceneRecord};
use crate::tensor::{DenseArray, Graph, Real, Var};
use crate::vqvae::{decode_graph, PoseVqvae, LATENT_DIM};

pub const EMBED_DIM: usize = 128;
/// Group size of the held-out retrieval score.
pub const RETRIEVAL_GROUP: usize = 32;
const NORM_EPS: f32 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineVariant {
    /// `−cos`: guidance pulls the pose toward the description.
    #[default]
    NegCos,
    /// `cos²`, minimized at orthogonality.
    CosSquared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub tau: f32,
    /// Average the text-to-pose and pose-to-text directions.
    pub symmetric: bool,
    pub cosine: CosineVariant,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { epochs: 30, batch: 64, lr: 1e-3, tau: 0.07, symmetric: false, cosine: CosineVariant::NegCos }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("alignment batch and lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    /// `[vocab×128]`.
    pub token_table: DenseArray<f32>,
    pub proj: Mlp,
    pub tau: f32,
}

/// `[B×V]` mean-pooling weights; each row sums to one over its tokens.
pub fn pooling_matrix<T: Real>(token_lists: &[&[u32]], vocab: usize) -> Result<DenseArray<T>> {
    let mut w = vec![T::zero(); token_lists.len() * vocab];
    for (r, tokens) in token_lists.iter().enumerate() {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token list".into()));
        }
        let share = T::of(1.0 / tokens.len() as f64);
        for &t in tokens.iter() {
            if t as usize >= vocab {
                return Err(Error::Vocabulary(t));
            }
            w[r * vocab + t as usize] += share;
        }
    }
    DenseArray::matrix(token_lists.len(), vocab, w)
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(vocab: usize, tau: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, 1.0).expect("valid std");
        let table = (0..vocab * EMBED_DIM).map(|_| normal.sample(rng)).collect();
        TextEncoder {
            token_table: DenseArray::matrix(vocab, EMBED_DIM, table).expect("dims"),
            proj: Mlp::new(&[EMBED_DIM, EMBED_DIM, LATENT_DIM], rng),
            tau,
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_table.rows()
    }

    pub fn embed_text(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        Ok(self.embed_batch(&[tokens])?.into_data())
    }

    /// `z_text` rows `[B×64]`.
    pub fn embed_batch(&self, token_lists: &[&[u32]]) -> Result<DenseArray<f32>> {
        let pool = pooling_matrix::<f32>(token_lists, self.vocab())?;
        self.proj.infer(&pool.matmul(&self.token_table)?)
    }

    pub fn is_finite(&self) -> bool {
        self.token_table.is_finite() && self.proj.is_finite()
    }
}

fn normalize_rows<T: Real>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let cols = g.value(a).cols();
    let sq = g.square(a);
    let s = g.row_sum(sq);
    let n = g.sqrt(s)?;
    let n = g.broadcast_cols(n, cols)?;
    g.div(a, n)
}

fn normalized_rows<T: Real>(a: &DenseArray<T>) -> DenseArray<T> {
    let cols = a.cols();
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let n = row.iter().fold(T::zero(), |s, &x| s + x * x).sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|x| *x = *x / n);
        }
    }
    out
}

fn transpose<T: Real>(a: &DenseArray<T>) -> DenseArray<T> {
    let (r, c) = (a.rows(), a.cols());
    let mut d = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            d[j * r + i] = a.get(i, j);
        }
    }
    DenseArray::matrix(c, r, d).expect("dims")
}

/// InfoNCE between text latents `z_text` (a graph variable) and fixed pose
/// latents, over cosine similarities scaled by `1/τ`, matched pairs on the
/// diagonal.
pub fn info_nce_graph<T: Real>(g: &mut Graph<T>, z_text: Var, z_pose: &DenseArray<T>, tau: f32, symmetric: bool) -> Result<Var> {
    let b = g.value(z_text).rows();
    let inv_tau = T::of(1.0 / tau as f64);
    let t = normalize_rows(g, z_text)?;
    let p = normalized_rows(z_pose);
    let pt = g.constant(transpose(&p));
    let sim = g.matmul(t, pt)?;
    let logits = g.scale(sim, inv_tau);
    let e = g.exp(logits);

    let pc = g.constant(p);
    let prod = g.mul(t, pc)?;
    let diag = g.row_sum(prod);
    let diag = g.scale(diag, inv_tau);
    let diag_mean = g.mean(diag);

    let rows = g.row_sum(e);
    let lse_rows = g.log(rows)?;
    let lse_rows = g.mean(lse_rows);
    let text_to_pose = g.sub(lse_rows, diag_mean)?;
    if !symmetric {
        return Ok(text_to_pose);
    }
    let ones = g.constant(DenseArray::full(&[1, b], T::one()));
    let cols = g.matmul(ones, e)?;
    let lse_cols = g.log(cols)?;
    let lse_cols = g.mean(lse_cols);
    let pose_to_text = g.sub(lse_cols, diag_mean)?;
    let both = g.add(text_to_pose, pose_to_text)?;
    Ok(g.scale(both, T::of(0.5)))
}

/// Contrastive term plus `‖D_p(z_text) − θ‖²` through the frozen decoder,
/// batch-averaged. With fewer than two pairs only the reconstruction term
/// remains. Returns the loss and the text-side graph variables.
pub fn align_loss_graph<T: Real>(
    g: &mut Graph<T>,
    text: &TextEncoder,
    vq: &PoseVqvae,
    theta: &DenseArray<T>,
    token_lists: &[&[u32]],
    symmetric: bool,
) -> Result<(Var, AlignVars)> {
    let b = token_lists.len();
    let table = g.param(text.token_table.cast());
    let proj = text.proj.bind(g, true);
    let pool = g.constant(pooling_matrix::<T>(token_lists, text.vocab())?);
    let pooled = g.matmul(pool, table)?;
    let z_text = proj.forward(g, pooled)?;

    let dec = vq.decoder.bind(g, false);
    let z_pose = if b >= 2 { Some(vq.encoder.infer(&theta.cast::<f32>())?.cast::<T>()) } else { None };
    if z_pose.is_none() {
        log::warn!("alignment batch of {b}: contrastive term skipped");
    }
    let loss = align_objective(g, z_text, &dec, theta, z_pose.as_ref(), text.tau, symmetric)?;
    Ok((loss, AlignVars { table, proj }))
}

/// The alignment loss given text latents: InfoNCE against `z_pose` (when
/// present) plus the batch-averaged reconstruction through `decoder`.
pub fn align_objective<T: Real>(
    g: &mut Graph<T>,
    z_text: Var,
    decoder: &crate::nn::BoundMlp,
    theta: &DenseArray<T>,
    z_pose: Option<&DenseArray<T>>,
    tau: f32,
    symmetric: bool,
) -> Result<Var> {
    let b = theta.rows();
    let recon = decode_graph(g, decoder, z_text)?;
    let th = g.constant(theta.clone());
    let d = g.sub(recon, th)?;
    let sq = g.square(d);
    let rec = g.sum(sq);
    let rec = g.scale(rec, T::of(1.0 / b as f64));
    match z_pose {
        Some(zp) => {
            let nce = info_nce_graph(g, z_text, zp, tau, symmetric)?;
            g.add(nce, rec)
        }
        None => Ok(rec),
    }
}

pub struct AlignVars {
    pub table: Var,
    pub proj: crate::nn::BoundMlp,
}

/// Guidance loss value and its gradient with respect to `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineOut {
    pub loss: f32,
    pub grad: Vec<f32>,
    /// A latent had zero norm; loss and gradient are reported as 0.
    pub degenerate: bool,
}

/// Cosine guidance for a batch: `θ: [B×144]` against text latents `[B×64]`.
/// The pose latent is the pre-quantization encoder output. Gradients are
/// back-propagated through the encoder by hand.
pub fn cosine_loss_batch(
    vq: &PoseVqvae,
    theta: &DenseArray<f32>,
    z_text: &DenseArray<f32>,
    variant: CosineVariant,
) -> Result<Vec<CosineOut>> {
    let layers = &vq.encoder.layers;
    if layers.len() != 2 {
        return Err(Error::Contract("cosine guidance expects a two-layer pose encoder".into()));
    }
    if theta.rows() != z_text.rows() || theta.cols() != THETA_DIM || z_text.cols() != LATENT_DIM {
        return Err(Error::shape("cosine_loss", format!("{:?} vs {:?}", theta.shape(), z_text.shape())));
    }
    let (l1, l2) = (&layers[0], &layers[1]);
    let b = theta.rows();
    let (h_dim, d) = (l1.weight.cols(), LATENT_DIM);
    let mut h = Vec::with_capacity(b * h_dim);
    for _ in 0..b {
        h.extend_from_slice(l1.bias.data());
    }
    f32::gemm(b, THETA_DIM, h_dim, theta.data(), false, l1.weight.data(), false, &mut h, true);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut z = Vec::with_capacity(b * d);
    for _ in 0..b {
        z.extend_from_slice(l2.bias.data());
    }
    f32::gemm(b, h_dim, d, &h, false, l2.weight.data(), false, &mut z, true);

    let mut out = Vec::with_capacity(b);
    let mut gz = vec![0.0f32; b * d];
    for r in 0..b {
        let zr = &z[r * d..(r + 1) * d];
        let tr = z_text.row_slice(r);
        let nz = zr.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nt = tr.iter().map(|x| x * x).sum::<f32>().sqrt();
        if nz < NORM_EPS || nt < NORM_EPS {
            out.push(CosineOut { loss: 0.0, grad: vec![0.0; THETA_DIM], degenerate: true });
            continue;
        }
        let cos = zr.iter().zip(tr).map(|(a, b)| a * b).sum::<f32>() / (nz * nt);
        let (loss, dl_dcos) = match variant {
            CosineVariant::NegCos => (-cos, -1.0),
            CosineVariant::CosSquared => (cos * cos, 2.0 * cos),
        };
        for k in 0..d {
            let dcos = tr[k] / (nz * nt) - cos * zr[k] / (nz * nz);
            gz[r * d + k] = dl_dcos * dcos;
        }
        out.push(CosineOut { loss, grad: Vec::new(), degenerate: false });
    }

    let mut gh = vec![0.0f32; b * h_dim];
    f32::gemm(b, d, h_dim, &gz, false, l2.weight.data(), true, &mut gh, false);
    for (g, &hv) in gh.iter_mut().zip(&h) {
        if hv <= 0.0 {
            *g = 0.0;
        }
    }
    let mut gt = vec![0.0f32; b * THETA_DIM];
    f32::gemm(b, h_dim, THETA_DIM, &gh, false, l1.weight.data(), true, &mut gt, false);
    for (r, o) in out.iter_mut().enumerate() {
        if !o.degenerate {
            o.grad = gt[r * THETA_DIM..(r + 1) * THETA_DIM].to_vec();
        }
    }
    Ok(out)
}

/// Single-pose form of [`cosine_loss_batch`], embedding the tokens first.
pub fn cosine_loss(theta: &[f32], tokens: &[u32], vq: &PoseVqvae, text: &TextEncoder, variant: CosineVariant) -> Result<CosineOut> {
    let z_text = text.embed_batch(&[tokens])?;
    let th = DenseArray::row(theta.to_vec());
    Ok(cosine_loss_batch(vq, &th, &z_text, variant)?.remove(0))
}

/// Graph form of the guidance loss summed over rows; used to check the hand
/// derivation.
pub fn cosine_loss_graph<T: Real>(g: &mut Graph<T>, vq: &PoseVqvae, theta: Var, z_text: &DenseArray<T>, variant: CosineVariant) -> Result<Var> {
    let enc = vq.encoder.bind(g, false);
    let z = enc.forward(g, theta)?;
    let zn = normalize_rows(g, z)?;
    let tn = g.constant(normalized_rows(z_text));
    let prod = g.mul(zn, tn)?;
    let cos = g.row_sum(prod);
    let per_row = match variant {
        CosineVariant::NegCos => g.neg(cos),
        CosineVariant::CosSquared => g.square(cos),
    };
    Ok(g.sum(per_row))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub losses: Vec<f32>,
    pub retrieval_top1: f64,
}

pub fn train_alignment(records: &[SceneRecord], vq: &PoseVqvae, cfg: &AlignConfig, seed: u64) -> Result<(TextEncoder, AlignReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("no alignment data".into()));
    }
    let mut text = TextEncoder::new(vocab_size(), cfg.tau, &mut substream(seed, "align-init", 0));
    let mut opt = Adam::new(cfg.lr);
    let mut report = AlignReport::default();
    let mut order: Vec<usize> = (0..records.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(seed, "align-shuffle", epoch as u64));
        let (mut total, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&SceneRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let theta = DenseArray::matrix(batch.len(), THETA_DIM, batch.iter().flat_map(|r| r.gt_params.theta.clone()).collect())?;
            let tokens: Vec<&[u32]> = batch.iter().map(|r| r.tokens.as_slice()).collect();
            let mut g = Graph::<f32>::new();
            let (loss, vars) = align_loss_graph(&mut g, &text, vq, &theta, &tokens, cfg.symmetric)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("alignment loss {value} at epoch {epoch}")));
            }
            total += value as f64 * batch.len() as f64;
            seen += batch.len();
            let grads = g.backward(loss)?;
            let mut all = vec![grads.wrt(&g, vars.table)];
            all.extend(vars.proj.grads(&g, &grads));
            let mut params = vec![&mut text.token_table];
            params.extend(text.proj.params_mut());
            opt.step(params, &all)?;
        }
        let mean = (total / seen.max(1) as f64) as f32;
        log::debug!("align epoch {epoch}: loss {mean:.4}");
        report.losses.push(mean);
    }
    if !text.is_finite() {
        return Err(Error::Diverged("text encoder weights are not finite".into()));
    }
    Ok((text, report))
}

fn cosine_rows(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Text-to-pose top-1 accuracy over consecutive groups of `group` scenes:
/// each description must rank its own pose first by cosine similarity.
pub fn retrieval_top1(text: &TextEncoder, vq: &PoseVqvae, records: &[SceneRecord], group: usize) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in records.chunks_exact(group) {
        let theta = DenseArray::matrix(chunk.len(), THETA_DIM, chunk.iter().flat_map(|r| r.gt_params.theta.clone()).collect())?;
        let zp = vq.encode(&theta)?;
        let tokens: Vec<&[u32]> = chunk.iter().map(|r| r.tokens.as_slice()).collect();
        let zt = text.embed_batch(&tokens)?;
        for i in 0..chunk.len() {
            let mut best = (0usize, f32::NEG_INFINITY);
            for j in 0..chunk.len() {
                let c = cosine_rows(zt.row_slice(i), zp.row_slice(j));
                if c > best.1 {
                    best = (j, c);
                }
            }
            hits += usize::from(best.0 == i);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Contract(format!("need at least {group} scenes for retrieval")));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean cosine between text and pose latents on matched pairs and on all
/// mismatched pairs within groups.
pub fn similarity_split(text: &TextEncoder, vq: &PoseVqvae, records: &[SceneRecord], group: usize) -> Result<(f64, f64)> {
    let (mut diag, mut nd, mut off, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for chunk in records.chunks_exact(group) {
        let theta = DenseArray::matrix(chunk.len(), THETA_DIM, chunk.iter().flat_map(|r| r.gt_params.theta.clone()).collect())?;
        let zp = vq.encode(&theta)?;
        let tokens: Vec<&[u32]> = chunk.iter().map(|r| r.tokens.as_slice()).collect();
        let zt = text.embed_batch(&tokens)?;
        for i in 0..chunk.len() {
            for j in 0..chunk.len() {
                let c = cosine_rows(zt.row_slice(i), zp.row_slice(j)) as f64;
                if i == j {
                    diag += c;
                    nd += 1;
                } else {
                    off += c;
                    no += 1;
                }
            }
        }
    }
    Ok((diag / nd.max(1) as f64, off / no.max(1) as f64))
}
