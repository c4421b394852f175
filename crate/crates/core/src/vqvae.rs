//! Discrete pose codebook: encoder, nearest-code quantizer with EMA codebook
//! updates, and decoder back to 6D joint rotations.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::{identity_theta, THETA_DIM};
use crate::error::{Error, Result};
use crate::nn::{Adam, BoundMlp, Mlp};
use crate::rng::substream;
use crate::tensor::{DenseArray, Graph, Real, Var};

pub const LATENT_DIM: usize = 64;
pub const HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub alpha: f32,
    pub decay: f32,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { codebook_size: 512, alpha: 0.25, decay: 0.99, epochs: 30, batch: 64, lr: 1e-3 }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size == 0 || self.batch == 0 {
            return Err(Error::Config("codebook size and batch must be positive".into()));
        }
        if !(self.alpha >= 0.0) || !(0.0..1.0).contains(&self.decay) || !(self.lr > 0.0) {
            return Err(Error::Config(format!("invalid vq settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseVqvae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// `[K×64]`.
    pub codebook: DenseArray<f32>,
    pub alpha: f32,
}

/// Nearest codebook row by Euclidean distance; ties go to the lower index.
pub fn quantize(z: &[f32], codebook: &DenseArray<f32>) -> Result<(usize, Vec<f32>)> {
    if codebook.rows() == 0 {
        return Err(Error::Contract("empty codebook".into()));
    }
    if z.len() != codebook.cols() {
        return Err(Error::shape("quantize", format!("latent {} vs codebook width {}", z.len(), codebook.cols())));
    }
    let mut best = (0usize, f32::INFINITY);
    for k in 0..codebook.rows() {
        let d: f32 = codebook.row_slice(k).iter().zip(z).map(|(c, x)| (c - x) * (c - x)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok((best.0, codebook.row_slice(best.0).to_vec()))
}

impl PoseVqvae {
    pub fn new<R: Rng + ?Sized>(codebook_size: usize, alpha: f32, rng: &mut R) -> Self {
        let encoder = Mlp::new(&[THETA_DIM, HIDDEN, LATENT_DIM], rng);
        let mut decoder = Mlp::new(&[LATENT_DIM, HIDDEN, THETA_DIM], rng);
        decoder.scale_last(0.1);
        PoseVqvae { encoder, decoder, codebook: DenseArray::zeros(&[codebook_size, LATENT_DIM]), alpha }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.rows()
    }

    /// Pre-quantization latents `[B×64]` for `theta: [B×144]`.
    pub fn encode(&self, theta: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        self.encoder.infer(theta)
    }

    /// 6D rotations `[B×144]`; the decoder predicts an offset from identity.
    pub fn decode(&self, z: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        let mut out = self.decoder.infer(z)?;
        let ident = identity_theta();
        for r in 0..out.rows() {
            let cols = out.cols();
            for (x, i) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(&ident) {
                *x += i;
            }
        }
        Ok(out)
    }

    pub fn quantize_batch(&self, z: &DenseArray<f32>) -> Result<(Vec<usize>, DenseArray<f32>)> {
        let mut ids = Vec::with_capacity(z.rows());
        let mut q = Vec::with_capacity(z.numel());
        for r in 0..z.rows() {
            let (id, v) = quantize(z.row_slice(r), &self.codebook)?;
            ids.push(id);
            q.extend(v);
        }
        Ok((ids, DenseArray::matrix(z.rows(), z.cols(), q)?))
    }

    /// Encode, quantize, decode.
    pub fn reconstruct(&self, theta: &DenseArray<f32>) -> Result<DenseArray<f32>> {
        let z = self.encode(theta)?;
        let (_, q) = self.quantize_batch(&z)?;
        self.decode(&q)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.codebook.is_finite()
    }
}

/// `D_p(z)` on a graph, with the identity offset.
pub fn decode_graph<T: Real>(g: &mut Graph<T>, decoder: &BoundMlp, z: Var) -> Result<Var> {
    let b = g.value(z).rows();
    let out = decoder.forward(g, z)?;
    let ident = g.constant(DenseArray::row(identity_theta().into_iter().map(|x| T::of(x as f64)).collect()));
    let ident = g.broadcast_rows(ident, b)?;
    g.add(out, ident)
}

/// `α‖E(θ) − sg[q]‖² + ‖D(q_st) − θ‖²`, averaged over the batch, where
/// `q_st = E(θ) + sg[shift]` passes decoder gradients straight to the encoder.
/// `shift` defaults to `q − E(θ)` at the current encoder output, which makes
/// the forward value of `q_st` equal `q`.
pub fn vq_loss_graph<T: Real>(
    g: &mut Graph<T>,
    encoder: &BoundMlp,
    decoder: &BoundMlp,
    theta: Var,
    quantized: &DenseArray<T>,
    alpha: f32,
    shift: Option<&DenseArray<T>>,
) -> Result<Var> {
    let b = g.value(theta).rows();
    let z = encoder.forward(g, theta)?;
    let q = g.constant(quantized.clone());
    let commit_diff = g.sub(z, q)?;
    let commit_sq = g.square(commit_diff);
    let commit = g.sum(commit_sq);

    let shift = match shift {
        Some(s) => s.clone(),
        None => {
            let zv = g.value(z);
            DenseArray::new(zv.shape().to_vec(), quantized.data().iter().zip(zv.data()).map(|(&a, &b)| a - b).collect())?
        }
    };
    let shift = g.constant(shift);
    let q_st = g.add(z, shift)?;
    let recon = decode_graph(g, decoder, q_st)?;
    let rec_diff = g.sub(recon, theta)?;
    let rec_sq = g.square(rec_diff);
    let rec = g.sum(rec_sq);

    let inv_b = T::of(1.0 / b as f64);
    let commit = g.scale(commit, T::of(alpha as f64) * inv_b);
    let rec = g.scale(rec, inv_b);
    g.add(commit, rec)
}

/// Running EMA statistics of code assignments.
#[derive(Clone, Debug)]
pub struct CodebookEma {
    pub decay: f32,
    pub counts: Vec<f32>,
    pub sums: DenseArray<f32>,
}

impl CodebookEma {
    pub fn new(codebook: &DenseArray<f32>, decay: f32) -> Self {
        CodebookEma { decay, counts: vec![1.0; codebook.rows()], sums: codebook.clone() }
    }

    /// Moves every assigned code toward the mean of its encodings; codes with
    /// no assignment in this batch are left untouched.
    pub fn update(&mut self, codebook: &mut DenseArray<f32>, z: &DenseArray<f32>, codes: &[usize]) {
        let d = codebook.cols();
        let mut n = vec![0.0f32; codebook.rows()];
        let mut s = vec![0.0f32; codebook.numel()];
        for (r, &k) in codes.iter().enumerate() {
            n[k] += 1.0;
            for (acc, x) in s[k * d..(k + 1) * d].iter_mut().zip(z.row_slice(r)) {
                *acc += x;
            }
        }
        let a = self.decay;
        for k in 0..codebook.rows() {
            if n[k] == 0.0 {
                continue;
            }
            self.counts[k] = a * self.counts[k] + (1.0 - a) * n[k];
            let sums = &mut self.sums.data_mut()[k * d..(k + 1) * d];
            for (acc, x) in sums.iter_mut().zip(&s[k * d..(k + 1) * d]) {
                *acc = a * *acc + (1.0 - a) * x;
            }
            let c = self.counts[k];
            for (dst, acc) in codebook.data_mut()[k * d..(k + 1) * d].iter_mut().zip(&self.sums.data()[k * d..(k + 1) * d]) {
                *dst = acc / c;
            }
        }
    }

    fn reseed(&mut self, codebook: &DenseArray<f32>, k: usize) {
        let d = codebook.cols();
        self.counts[k] = 1.0;
        self.sums.data_mut()[k * d..(k + 1) * d].copy_from_slice(codebook.row_slice(k));
    }
}

/// `exp` of the entropy of the code-usage distribution.
pub fn perplexity(usage: &[usize]) -> f64 {
    let total: usize = usage.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = usage
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqReport {
    pub losses: Vec<f32>,
    pub perplexity: f64,
    pub usage: Vec<usize>,
    pub reseeded: usize,
}

fn theta_matrix(poses: &[&[f32]]) -> Result<DenseArray<f32>> {
    DenseArray::matrix(poses.len(), THETA_DIM, poses.iter().flat_map(|p| p.iter().copied()).collect())
}

/// Trains on a set of `θ` vectors. Codes unused over an epoch are re-seeded
/// from random encoder outputs, except after the last epoch.
pub fn train_vqvae(poses: &[&[f32]], cfg: &VqConfig, seed: u64) -> Result<(PoseVqvae, VqReport)> {
    cfg.validate()?;
    if poses.is_empty() {
        return Err(Error::Contract("no training poses".into()));
    }
    let mut model = PoseVqvae::new(cfg.codebook_size, cfg.alpha, &mut substream(seed, "vq-init", 0));
    let k = cfg.codebook_size;

    let mut init_rng = substream(seed, "vq-codebook", 0);
    let picks: Vec<&[f32]> = (0..k).map(|_| poses[init_rng.random_range(0..poses.len())]).collect();
    let z0 = model.encode(&theta_matrix(&picks)?)?;
    model.codebook = z0;
    for x in model.codebook.data_mut() {
        *x += 1e-3 * (init_rng.random::<f32>() - 0.5);
    }
    let mut ema = CodebookEma::new(&model.codebook, cfg.decay);

    let mut opt = Adam::new(cfg.lr);
    let mut report = VqReport::default();
    let mut order: Vec<usize> = (0..poses.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut substream(seed, "vq-shuffle", epoch as u64));
        let mut usage = vec![0usize; k];
        let (mut total, mut seen) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&[f32]> = chunk.iter().map(|&i| poses[i]).collect();
            let theta = theta_matrix(&batch)?;
            let z = model.encode(&theta)?;
            let (codes, q) = model.quantize_batch(&z)?;
            for &c in &codes {
                usage[c] += 1;
            }

            let mut g = Graph::<f32>::new();
            let enc = model.encoder.bind(&mut g, true);
            let dec = model.decoder.bind(&mut g, true);
            let tv = g.constant(theta);
            let loss = vq_loss_graph(&mut g, &enc, &dec, tv, &q, model.alpha, None)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!("vq loss {value} at epoch {epoch}")));
            }
            total += value as f64 * batch.len() as f64;
            seen += batch.len();
            let grads = g.backward(loss)?;
            let (ge, gd) = (enc.grads(&g, &grads), dec.grads(&g, &grads));
            let mut params = model.encoder.params_mut();
            params.extend(model.decoder.params_mut());
            let all: Vec<DenseArray<f32>> = ge.into_iter().chain(gd).collect();
            opt.step(params, &all)?;
            ema.update(&mut model.codebook, &z, &codes);
        }
        report.losses.push((total / seen.max(1) as f64) as f32);
        let ppl = perplexity(&usage);
        if ppl < 8.0 {
            log::warn!("vq codebook collapse at epoch {epoch}: perplexity {ppl:.2}");
        }
        log::debug!("vq epoch {epoch}: loss {:.4} perplexity {ppl:.1}", report.losses[epoch]);
        report.perplexity = ppl;
        report.usage = usage.clone();
        if epoch + 1 < cfg.epochs {
            let dead: Vec<usize> = (0..k).filter(|&c| usage[c] == 0).collect();
            if !dead.is_empty() {
                let mut rng = substream(seed, "vq-reseed", epoch as u64);
                let picks: Vec<&[f32]> = dead.iter().map(|_| poses[rng.random_range(0..poses.len())]).collect();
                let z = model.encode(&theta_matrix(&picks)?)?;
                let d = LATENT_DIM;
                for (i, &c) in dead.iter().enumerate() {
                    model.codebook.data_mut()[c * d..(c + 1) * d].copy_from_slice(z.row_slice(i));
                    ema.reseed(&model.codebook, c);
                }
                report.reseeded += dead.len();
            }
        }
    }
    if !model.is_finite() {
        return Err(Error::Diverged("vq weights are not finite".into()));
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantize_examples() {
        let cb = DenseArray::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(quantize(&[0.2, 0.1], &cb).unwrap().0, 0);
        let mut rows = vec![5.0f32; 8 * 2];
        rows[6..8].copy_from_slice(&[1.0, 0.0]);
        rows[14..16].copy_from_slice(&[-1.0, 0.0]);
        let cb = DenseArray::matrix(8, 2, rows).unwrap();
        assert_eq!(quantize(&[0.0, 0.0], &cb).unwrap().0, 3);
        assert!(quantize(&[0.0], &cb).is_err());
    }

    #[test]
    fn ema_leaves_unassigned_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cb = DenseArray::matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let before = cb.clone();
        let mut ema = CodebookEma::new(&cb, 0.9);
        let z = DenseArray::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        ema.update(&mut cb, &z, &[1, 4, 1]);
        for k in [0, 2, 3, 5] {
            assert_eq!(cb.row_slice(k), before.row_slice(k));
        }
        assert_ne!(cb.row_slice(1), before.row_slice(1));
        assert_ne!(cb.row_slice(4), before.row_slice(4));
    }

    #[test]
    fn perplexity_bounds() {
        assert!((perplexity(&[5, 5, 5, 5]) - 4.0).abs() < 1e-9);
        assert!((perplexity(&[9, 0, 0]) - 1.0).abs() < 1e-9);
    }
}
