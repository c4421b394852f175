//! Stage orchestration shared by the CLI subcommands and `run-all`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::BodyTemplate;
use crate::checkpoint::{Checkpoint, Persist, Provenance};
use crate::config::RunConfig;
use crate::diffusion::{train_diffusion, Denoiser, Guide};
use crate::error::{Error, Result};
use crate::eval::{run_ablation, AblationSetup, AblationTable, Models};
use crate::regressor::{train_regressor, RegressorNet};
use crate::scene::{corpus_hash, generate_corpus, write_corpus, SceneRecord};
use crate::text::{retrieval_top1, RETRIEVAL_GROUP, train_alignment, TextEncoder};
use crate::vqvae::{train_vqvae, PoseVqvae};

pub const REGRESSOR_CKPT: &str = "regressor.ckpt";
pub const VQVAE_CKPT: &str = "vqvae.ckpt";
pub const ALIGN_CKPT: &str = "align.ckpt";
pub const DIFFUSION_CKPT: &str = "diffusion.ckpt";
pub const MANIFEST: &str = "manifest.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

/// Corpus splits; each draws scene ids from its own range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Regressor,
    Diffusion,
    Eval,
}

impl Split {
    pub fn first_id(self) -> u64 {
        match self {
            Split::Regressor => 0,
            Split::Diffusion => 1 << 32,
            Split::Eval => 2 << 32,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Regressor => "regressor.jsonl",
            Split::Diffusion => "diffusion.jsonl",
            Split::Eval => "eval.jsonl",
        }
    }

    fn count(self, cfg: &RunConfig) -> usize {
        match self {
            Split::Regressor => cfg.data.regressor_scenes,
            Split::Diffusion => cfg.data.diffusion_scenes,
            Split::Eval => cfg.data.eval_scenes,
        }
    }
}

pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<SceneRecord>> {
    generate_corpus(cfg.seed, split.first_id(), split.count(cfg), &BodyTemplate::canonical(), &cfg.data.camera, &cfg.data.noise)
}

pub fn provenance(cfg: &RunConfig, corpus: &[SceneRecord]) -> Result<Provenance> {
    Ok(Provenance { config: cfg.to_value(), seed: cfg.seed, corpus_hash: corpus_hash(corpus)?, config_hash: cfg.hash() })
}

pub fn fit_regressor(cfg: &RunConfig, corpus: &[SceneRecord]) -> Result<RegressorNet> {
    Ok(train_regressor(corpus, &BodyTemplate::canonical(), &cfg.regressor, cfg.seed)?.0)
}

pub fn fit_vqvae(cfg: &RunConfig, corpus: &[SceneRecord]) -> Result<PoseVqvae> {
    let poses: Vec<&[f32]> = corpus.iter().map(|r| r.gt_params.theta.as_slice()).collect();
    let (vq, report) = train_vqvae(&poses, &cfg.vqvae, cfg.seed)?;
    log::info!("pose codebook perplexity {:.1}, {} codes reseeded", report.perplexity, report.reseeded);
    Ok(vq)
}

pub fn fit_alignment(cfg: &RunConfig, corpus: &[SceneRecord], vq: &PoseVqvae) -> Result<TextEncoder> {
    Ok(train_alignment(corpus, vq, &cfg.align, cfg.seed)?.0)
}

pub fn fit_diffusion(
    cfg: &RunConfig,
    corpus: &[SceneRecord],
    regressor: &RegressorNet,
    vq: &PoseVqvae,
    text: &TextEncoder,
) -> Result<Denoiser> {
    let template = BodyTemplate::canonical();
    let preds = regressor.predict_records(corpus)?;
    let scenes = preds
        .into_iter()
        .zip(corpus)
        .map(|(init, record)| Ok(crate::diffusion::SceneCtx { record, init, z_text: text.embed_text(&record.tokens)? }))
        .collect::<Result<Vec<_>>>()?;
    let guide = Guide { template: &template, vq, cosine: cfg.diffusion.cosine };
    let (model, report) = train_diffusion(&scenes, &cfg.diffusion, &guide, cfg.seed)?;
    log::info!("denoiser loss {:.4} -> {:.4}", report.losses.first().unwrap_or(&f32::NAN), report.losses.last().unwrap_or(&f32::NAN));
    Ok(model)
}

/// Writes through a `.partial` file and renames once complete.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let partial = partial_path(path);
    write(&partial)?;
    fs::rename(&partial, path)?;
    Ok(())
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, |p| ck.save(p))
}

/// Loads the four checkpoints from `dir`, refusing sets whose config hashes
/// differ unless `allow_mixed`.
pub fn load_models(dir: &Path, allow_mixed: bool) -> Result<(Models, Checkpoint)> {
    let names = [REGRESSOR_CKPT, VQVAE_CKPT, ALIGN_CKPT, DIFFUSION_CKPT];
    let missing: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).filter(|p| !p.is_file()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let cks: Vec<Checkpoint> = names.iter().map(|n| Checkpoint::load(&dir.join(n))).collect::<Result<_>>()?;
    let hashes: Vec<&str> = cks.iter().map(|c| c.manifest.config_hash.as_str()).collect();
    if hashes.iter().any(|h| *h != hashes[0]) {
        let listing: Vec<String> = names.iter().zip(&hashes).map(|(n, h)| format!("{n}={h}")).collect();
        if allow_mixed {
            log::warn!("mixed config hashes: {}", listing.join(", "));
        } else {
            return Err(Error::MixedHash(listing.join(", ")));
        }
    }
    let models = Models {
        regressor: RegressorNet::from_checkpoint(&cks[0])?,
        vq: PoseVqvae::from_checkpoint(&cks[1])?,
        text: TextEncoder::from_checkpoint(&cks[2])?,
        denoiser: Denoiser::from_checkpoint(&cks[3])?,
    };
    let diffusion = cks.into_iter().nth(3).expect("four checkpoints");
    Ok((models, diffusion))
}

/// The run config embedded in a checkpoint.
pub fn embedded_config(ck: &Checkpoint) -> Result<RunConfig> {
    serde_json::from_value(ck.manifest.config.clone()).map_err(|e| Error::Config(format!("embedded config: {e}")))
}

pub fn ablate(records: &[SceneRecord], models: &Models, cfg: &RunConfig, config_hash: &str) -> Result<AblationTable> {
    let template = BodyTemplate::canonical();
    let setup = AblationSetup { template: &template, seeds: &cfg.eval.seeds, pa_scale: cfg.eval.pa_scale, config_hash };
    run_ablation(records, models, &cfg.eval.masks, &setup, cfg.to_value())
}

pub fn write_ablation(dir: &Path, table: &AblationTable) -> Result<()> {
    write_atomic(&dir.join(ABLATION_CSV), |p| Ok(fs::write(p, table.to_csv())?))?;
    write_atomic(&dir.join(ABLATION_JSON), |p| Ok(fs::write(p, serde_json::to_vec_pretty(table)?)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub stages: Vec<StageRecord>,
    /// Held-out text-to-pose top-1 retrieval in groups of 32.
    pub retrieval_top1: Option<f64>,
    pub complete: bool,
}

/// Everything `run-all` produced.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub table: AblationTable,
    pub models: Models,
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

struct Recorder<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Recorder<'_> {
    fn stage<T>(&mut self, name: &str, run: impl FnOnce(&Path) -> Result<(T, Vec<PathBuf>)>) -> Result<T> {
        log::info!("stage {name}");
        let start = Instant::now();
        let (value, paths) = run(self.dir)?;
        let artifacts = paths
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(self.dir).unwrap_or(p).to_string_lossy().into_owned();
                Ok(ArtifactRecord { path: rel, sha256: file_sha(p)? })
            })
            .collect::<Result<_>>()?;
        self.manifest.stages.push(StageRecord { stage: name.to_string(), seconds: start.elapsed().as_secs_f64(), artifacts });
        self.flush()?;
        Ok(value)
    }

    /// The manifest stays under a `.partial` name until the run completes.
    fn flush(&self) -> Result<()> {
        let path = if self.manifest.complete { self.dir.join(MANIFEST) } else { partial_path(&self.dir.join(MANIFEST)) };
        fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Data generation, the four training stages and the ablation, in order.
/// A failed stage leaves completed artifacts and `manifest.json.partial`.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("data"))?;
    let config_hash = cfg.hash();
    let mut rec = Recorder {
        dir,
        manifest: RunManifest { config_hash: config_hash.clone(), config: cfg.to_value(), stages: Vec::new(), retrieval_top1: None, complete: false },
    };

    let [train, diff, held_out] = rec.stage("gen-data", |dir| {
        let mut out = Vec::new();
        let mut paths = Vec::new();
        for split in [Split::Regressor, Split::Diffusion, Split::Eval] {
            let records = generate_split(cfg, split)?;
            let path = dir.join("data").join(split.file_name());
            write_atomic(&path, |p| write_corpus(p, &records))?;
            paths.push(path);
            out.push(records);
        }
        let out: [Vec<SceneRecord>; 3] = out.try_into().map_err(|_| Error::Contract("three splits".into()))?;
        Ok((out, paths))
    })?;
    let prov = provenance(cfg, &train)?;

    let regressor = rec.stage("train-regressor", |dir| {
        let net = fit_regressor(cfg, &train)?;
        let path = dir.join(REGRESSOR_CKPT);
        save_checkpoint(&path, &net.to_checkpoint(&prov))?;
        Ok((net, vec![path]))
    })?;
    let vq = rec.stage("train-vqvae", |dir| {
        let vq = fit_vqvae(cfg, &train)?;
        let path = dir.join(VQVAE_CKPT);
        save_checkpoint(&path, &vq.to_checkpoint(&prov))?;
        Ok((vq, vec![path]))
    })?;
    let text = rec.stage("train-align", |dir| {
        let text = fit_alignment(cfg, &train, &vq)?;
        let path = dir.join(ALIGN_CKPT);
        save_checkpoint(&path, &text.to_checkpoint(&prov))?;
        Ok((text, vec![path]))
    })?;
    rec.manifest.retrieval_top1 = Some(retrieval_top1(&text, &vq, &held_out, RETRIEVAL_GROUP)?);
    let diff_prov = provenance(cfg, &diff)?;
    let denoiser = rec.stage("train-diffusion", |dir| {
        let model = fit_diffusion(cfg, &diff, &regressor, &vq, &text)?;
        let path = dir.join(DIFFUSION_CKPT);
        save_checkpoint(&path, &model.to_checkpoint(&diff_prov))?;
        Ok((model, vec![path]))
    })?;

    let models = Models { regressor, vq, text, denoiser };
    let table = rec.stage("ablate", |dir| {
        let table = ablate(&held_out, &models, cfg, &config_hash)?;
        write_ablation(dir, &table)?;
        Ok((table, vec![dir.join(ABLATION_CSV), dir.join(ABLATION_JSON)]))
    })?;

    rec.manifest.complete = true;
    rec.flush()?;
    let _ = fs::remove_file(partial_path(&dir.join(MANIFEST)));
    Ok(RunOutput { manifest: rec.manifest, table, models })
}
