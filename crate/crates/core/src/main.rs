use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vlfa::body::BodyTemplate;
use vlfa::checkpoint::{Checkpoint, Persist};
use vlfa::config::RunConfig;
use vlfa::diffusion::{refine_batch, Mask, RefineOptions};
use vlfa::error::{Error, Result};
use vlfa::eval::{evaluate, gaussian_contexts};
use vlfa::pipeline::*;
use vlfa::regressor::RegressorNet;
use vlfa::scene::{generate_corpus, read_corpus, write_corpus, NoiseConfig};
use vlfa::text::TextEncoder;
use vlfa::vqvae::PoseVqvae;

#[derive(Parser)]
#[command(name = "vlfa", version, about = "Keypoint- and text-guided diffusion refinement of body poses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus as JSON lines.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        sigma_px: f32,
        #[arg(long, default_value_t = 0.15)]
        p_occ: f32,
        /// Id of the first scene.
        #[arg(long, default_value_t = 0)]
        first: u64,
    },
    /// Train the initial-prediction regressor.
    TrainRegressor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the pose codebook.
    TrainVqvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Align text descriptions with the pose latent space.
    TrainAlign {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the denoiser; reads the other three checkpoints from `--ckpt-dir`.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Refine the initial predictions of a corpus.
    Refine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value = "all")]
        mask: Mask,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write every scene's residual trajectory as JSON lines.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Score one setting: `init`, `gaussian` or a condition mask.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value = "all")]
        row: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Run the condition ablation and write the CSV and JSON tables.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config embedded in the checkpoints.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Every stage from data generation to the ablation.
    RunAll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, count, out, sigma_px, p_occ, first } => {
            let cfg = NoiseConfig { sigma_px, p_occ };
            let records = generate_corpus(seed, first, count, &BodyTemplate::canonical(), &Default::default(), &cfg)?;
            write_atomic(&out, |p| write_corpus(p, &records))?;
        }
        Command::TrainRegressor { data, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus(&data)?;
            let net = fit_regressor(&cfg, &corpus)?;
            save_checkpoint(&out, &net.to_checkpoint(&provenance(&cfg, &corpus)?))?;
        }
        Command::TrainVqvae { data, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus(&data)?;
            let vq = fit_vqvae(&cfg, &corpus)?;
            save_checkpoint(&out, &vq.to_checkpoint(&provenance(&cfg, &corpus)?))?;
        }
        Command::TrainAlign { data, vqvae, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus(&data)?;
            let vq = PoseVqvae::from_checkpoint(&Checkpoint::load(&vqvae)?)?;
            let text = fit_alignment(&cfg, &corpus, &vq)?;
            save_checkpoint(&out, &text.to_checkpoint(&provenance(&cfg, &corpus)?))?;
        }
        Command::TrainDiffusion { data, ckpt_dir, out, config } => {
            let cfg = load_config(config.as_deref())?;
            let corpus = read_corpus(&data)?;
            let load = |name: &str| Checkpoint::load(&ckpt_dir.join(name));
            let regressor = RegressorNet::from_checkpoint(&load(REGRESSOR_CKPT)?)?;
            let vq = PoseVqvae::from_checkpoint(&load(VQVAE_CKPT)?)?;
            let text = TextEncoder::from_checkpoint(&load(ALIGN_CKPT)?)?;
            let model = fit_diffusion(&cfg, &corpus, &regressor, &vq, &text)?;
            let out = out.unwrap_or_else(|| ckpt_dir.join(DIFFUSION_CKPT));
            save_checkpoint(&out, &model.to_checkpoint(&provenance(&cfg, &corpus)?))?;
        }
        Command::Refine { data, ckpt_dir, mask, out, seed, trajectory, allow_mixed } => {
            let (models, _) = load_models(&ckpt_dir, allow_mixed)?;
            let corpus = read_corpus(&data)?;
            let template = BodyTemplate::canonical();
            let scenes = models.contexts(&corpus)?;
            let refs: Vec<_> = scenes.iter().collect();
            let opts = RefineOptions { keep_trajectory: trajectory.is_some(), ..RefineOptions::new(mask, seed) };
            let results = refine_batch(&refs, &models.denoiser, &models.denoiser.cfg, &models.guide(&template), &opts)?;
            write_atomic(&out, |p| {
                let mut f = std::io::BufWriter::new(fs::File::create(p)?);
                for (r, s) in results.iter().zip(&corpus) {
                    let line = serde_json::json!({ "id": s.id, "params": r.params, "flags": r.flags });
                    writeln!(f, "{line}")?;
                }
                Ok(f.flush()?)
            })?;
            if let Some(path) = trajectory {
                write_atomic(&path, |p| {
                    let mut f = std::io::BufWriter::new(fs::File::create(p)?);
                    for (r, s) in results.iter().zip(&corpus) {
                        let line = serde_json::json!({ "id": s.id, "trajectory": r.trajectory });
                        writeln!(f, "{line}")?;
                    }
                    Ok(f.flush()?)
                })?;
            }
        }
        Command::Eval { data, ckpt_dir, row, seed, out, allow_mixed } => {
            let (models, diffusion) = load_models(&ckpt_dir, allow_mixed)?;
            let cfg = embedded_config(&diffusion)?;
            let corpus = read_corpus(&data)?;
            let template = BodyTemplate::canonical();
            let scenes = models.contexts(&corpus)?;
            let hash = &diffusion.manifest.config_hash;
            let report = match row.as_str() {
                "init" => {
                    let preds: Vec<_> = scenes.iter().map(|s| s.init.clone()).collect();
                    evaluate("init", None, &preds, &vec![false; corpus.len()], &corpus, &template, cfg.eval.pa_scale, hash)?
                }
                "gaussian" => {
                    let (preds, flags) = models.refine(&gaussian_contexts(&scenes), &template, Mask::All, seed)?;
                    evaluate("gaussian", Some(seed), &preds, &flags, &corpus, &template, cfg.eval.pa_scale, hash)?
                }
                other => {
                    let mask: Mask = other.parse()?;
                    let (preds, flags) = models.refine(&scenes, &template, mask, seed)?;
                    evaluate(other, Some(seed), &preds, &flags, &corpus, &template, cfg.eval.pa_scale, hash)?
                }
            };
            println!("{}: MPJPE {:.2} mm, PA-MPJPE {:.2} mm over {} scenes", report.row, report.mpjpe_mm, report.pa_mpjpe_mm, report.n_scenes);
            write_atomic(&out, |p| Ok(fs::write(p, serde_json::to_vec_pretty(&report)?)?))?;
        }
        Command::Ablate { data, ckpt_dir, out, config, allow_mixed } => {
            let (models, diffusion) = load_models(&ckpt_dir, allow_mixed)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => embedded_config(&diffusion)?,
            };
            let corpus = read_corpus(&data)?;
            let table = ablate(&corpus, &models, &cfg, &diffusion.manifest.config_hash)?;
            fs::create_dir_all(&out)?;
            write_ablation(&out, &table)?;
            print!("{}", table.to_csv());
        }
        Command::RunAll { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let result = run_all(&cfg, &out)?;
            print!("{}", result.table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("VLFA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingArtifacts(paths) = &e {
                for p in paths {
                    eprintln!("  missing {}", p.display());
                }
            }
            ExitCode::FAILURE
        }
    }
}
