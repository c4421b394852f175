//! Single-file checkpoints: `VLFA1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f32` in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DiffusionConfig};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::regressor::RegressorNet;
use crate::tensor::DenseArray;
use crate::text::TextEncoder;
use crate::vqvae::PoseVqvae;

pub const MAGIC: &[u8; 5] = b"VLFA1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub module: String,
    pub tensors: Vec<TensorEntry>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub corpus_hash: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<DenseArray<f32>>,
}

/// Identity of the run a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub config: serde_json::Value,
    pub seed: u64,
    pub corpus_hash: String,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn new(module: &str, named: Vec<(String, DenseArray<f32>)>, prov: &Provenance) -> Self {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (name, t) in named {
            entries.push(TensorEntry { name, shape: t.shape().to_vec(), offset });
            offset += 4 * t.numel();
            tensors.push(t);
        }
        Checkpoint {
            manifest: Manifest {
                module: module.to_string(),
                tensors: entries,
                config: prov.config.clone(),
                seed: prov.seed,
                corpus_hash: prov.corpus_hash.clone(),
                config_hash: prov.config_hash.clone(),
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let payload: usize = self.tensors.iter().map(|t| 4 * t.numel()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(Error::Format("missing manifest length".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < len {
            return Err(Error::Format(format!("manifest of {len} bytes is truncated")));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[..len]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let payload = &rest[len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected = 0usize;
        for e in &manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Integrity(format!("tensor {:?} at offset {} but expected {expected}", e.name, e.offset)));
            }
            let end = e.offset + 4 * numel;
            if end > payload.len() {
                return Err(Error::Integrity(format!(
                    "tensor {:?} needs bytes {}..{end} but the payload has {}",
                    e.name,
                    e.offset,
                    payload.len()
                )));
            }
            let data = payload[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(DenseArray::new(e.shape.clone(), data).map_err(|_| Error::Integrity(format!("tensor {:?} has an invalid shape", e.name)))?);
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::Integrity(format!("{} trailing payload bytes", payload.len() - expected)));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn expect_module(&self, module: &str) -> Result<()> {
        if self.manifest.module != module {
            return Err(Error::Format(format!("expected a {module} checkpoint, found {}", self.manifest.module)));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&DenseArray<f32>> {
        self.manifest
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Integrity(format!("missing tensor {name:?}")))
    }
}

fn mlp_tensors(prefix: &str, mlp: &Mlp) -> Vec<(String, DenseArray<f32>)> {
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| [(format!("{prefix}.{i}.weight"), l.weight.clone()), (format!("{prefix}.{i}.bias"), l.bias.clone())])
        .collect()
}

fn mlp_from(ck: &Checkpoint, prefix: &str, dims: &[usize]) -> Result<Mlp> {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, w) in dims.windows(2).enumerate() {
        let weight = ck.tensor(&format!("{prefix}.{i}.weight"))?.clone();
        let bias = ck.tensor(&format!("{prefix}.{i}.bias"))?.clone();
        if weight.shape() != [w[0], w[1]] || bias.shape() != [1, w[1]] {
            return Err(Error::Integrity(format!("{prefix}.{i} has shape {:?}, expected [{}, {}]", weight.shape(), w[0], w[1])));
        }
        layers.push(Linear { weight, bias });
    }
    Ok(Mlp { layers })
}

fn scalar(ck: &Checkpoint, name: &str) -> Result<f32> {
    let t = ck.tensor(name)?;
    if t.numel() != 1 {
        return Err(Error::Integrity(format!("{name:?} should hold one value")));
    }
    Ok(t.data()[0])
}

/// Conversion between a model and its checkpoint tensors.
pub trait Persist: Sized {
    const MODULE: &'static str;
    fn tensors(&self) -> Vec<(String, DenseArray<f32>)>;
    fn from_checkpoint(ck: &Checkpoint) -> Result<Self>;

    fn to_checkpoint(&self, prov: &Provenance) -> Checkpoint {
        Checkpoint::new(Self::MODULE, self.tensors(), prov)
    }
}

impl Persist for RegressorNet {
    const MODULE: &'static str = "regressor";

    fn tensors(&self) -> Vec<(String, DenseArray<f32>)> {
        mlp_tensors("mlp", &self.mlp)
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_module(Self::MODULE)?;
        let dims = RegressorNet::zeros().mlp.dims();
        Ok(RegressorNet { mlp: mlp_from(ck, "mlp", &dims)? })
    }
}

impl Persist for PoseVqvae {
    const MODULE: &'static str = "vqvae";

    fn tensors(&self) -> Vec<(String, DenseArray<f32>)> {
        let mut t = mlp_tensors("encoder", &self.encoder);
        t.extend(mlp_tensors("decoder", &self.decoder));
        t.push(("codebook".into(), self.codebook.clone()));
        t.push(("alpha".into(), DenseArray::scalar(self.alpha)));
        t
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_module(Self::MODULE)?;
        let codebook = ck.tensor("codebook")?.clone();
        if codebook.shape().len() != 2 || codebook.cols() != crate::vqvae::LATENT_DIM {
            return Err(Error::Integrity(format!("codebook has shape {:?}", codebook.shape())));
        }
        let template = PoseVqvae::new(1, 0.0, &mut crate::rng::substream(0, "shape", 0));
        Ok(PoseVqvae {
            encoder: mlp_from(ck, "encoder", &template.encoder.dims())?,
            decoder: mlp_from(ck, "decoder", &template.decoder.dims())?,
            codebook,
            alpha: scalar(ck, "alpha")?,
        })
    }
}

impl Persist for TextEncoder {
    const MODULE: &'static str = "align";

    fn tensors(&self) -> Vec<(String, DenseArray<f32>)> {
        let mut t = vec![("token_table".to_string(), self.token_table.clone())];
        t.extend(mlp_tensors("proj", &self.proj));
        t.push(("tau".into(), DenseArray::scalar(self.tau)));
        t
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_module(Self::MODULE)?;
        let token_table = ck.tensor("token_table")?.clone();
        if token_table.shape().len() != 2 || token_table.cols() != crate::text::EMBED_DIM {
            return Err(Error::Integrity(format!("token_table has shape {:?}", token_table.shape())));
        }
        let dims = TextEncoder::new(1, 1.0, &mut crate::rng::substream(0, "shape", 0)).proj.dims();
        Ok(TextEncoder { token_table, proj: mlp_from(ck, "proj", &dims)?, tau: scalar(ck, "tau")? })
    }
}

impl Persist for Denoiser {
    const MODULE: &'static str = "diffusion";

    fn tensors(&self) -> Vec<(String, DenseArray<f32>)> {
        let mut t = mlp_tensors("net", &self.net);
        t.push(("cond_scale".into(), DenseArray::row(self.cond_scale.clone())));
        t
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_module(Self::MODULE)?;
        let cfg: DiffusionConfig = match ck.manifest.config.get("diffusion") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("diffusion config: {e}")))?,
            None => return Err(Error::Format("diffusion checkpoint lacks its config".into())),
        };
        let dims = [Denoiser::input_dim(), crate::diffusion::HIDDEN, crate::diffusion::HIDDEN, crate::diffusion::X_DIM];
        let cond_scale = ck.tensor("cond_scale")?.data().to_vec();
        if cond_scale.len() != crate::diffusion::COND_DIM {
            return Err(Error::Integrity(format!("cond_scale has {} entries", cond_scale.len())));
        }
        Ok(Denoiser { net: mlp_from(ck, "net", &dims)?, cond_scale, cfg })
    }
}
