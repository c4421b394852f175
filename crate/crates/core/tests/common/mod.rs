#![allow(dead_code)]

pub mod gradcheck;

use std::sync::OnceLock;

use vlfa::body::BodyTemplate;
use vlfa::config::RunConfig;
use vlfa::eval::Models;
use vlfa::pipeline::{fit_alignment, fit_diffusion, fit_regressor, fit_vqvae, generate_split, Split};
use vlfa::scene::SceneRecord;

/// A configuration small enough to train every stage in seconds.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.regressor_scenes = 1500;
    cfg.data.diffusion_scenes = 3000;
    cfg.data.eval_scenes = 200;
    cfg.regressor.epochs = 20;
    cfg.vqvae.codebook_size = 64;
    cfg.vqvae.epochs = 10;
    cfg.align.epochs = 10;
    cfg.diffusion.epochs = 20;
    cfg.eval.seeds = vec![0];
    cfg
}

pub struct Fixture {
    pub cfg: RunConfig,
    pub template: BodyTemplate,
    pub train: Vec<SceneRecord>,
    pub eval: Vec<SceneRecord>,
    pub models: Models,
}

/// Every stage trained once per test binary on [`small_config`].
pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = small_config();
        let base = generate_split(&cfg, Split::Regressor).unwrap();
        let train = generate_split(&cfg, Split::Diffusion).unwrap();
        let eval = generate_split(&cfg, Split::Eval).unwrap();
        let regressor = fit_regressor(&cfg, &base).unwrap();
        let vq = fit_vqvae(&cfg, &base).unwrap();
        let text = fit_alignment(&cfg, &base, &vq).unwrap();
        let denoiser = fit_diffusion(&cfg, &train, &regressor, &vq, &text).unwrap();
        Fixture { cfg, template: BodyTemplate::canonical(), train, eval, models: Models { regressor, vq, text, denoiser } }
    })
}
