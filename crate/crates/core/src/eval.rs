//! Joint-error metrics, per-run evaluation reports and the condition ablation.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{forward_kinematics, identity_theta, BodyTemplate, JointSet, PoseParams, PELVIS};
use crate::diffusion::{refine_batch, Denoiser, Guide, Mask, RefineOptions, SceneCtx};
use crate::error::{Error, Result};
use crate::regressor::RegressorNet;
use crate::scene::SceneRecord;
use crate::text::TextEncoder;
use crate::vqvae::PoseVqvae;

/// Mean Euclidean joint distance in millimeters.
pub fn mpjpe(pred: &JointSet, gt: &JointSet) -> Result<f64> {
    check_counts(pred, gt)?;
    if pred.is_empty() {
        return Err(Error::shape("mpjpe", "empty joint sets"));
    }
    let total: f64 = pred.positions.iter().zip(&gt.positions).map(|(a, b)| dist(a, b)).sum();
    Ok(1000.0 * total / pred.len() as f64)
}

fn dist(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

fn check_counts(pred: &JointSet, gt: &JointSet) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("mpjpe", format!("{} vs {} joints", pred.len(), gt.len())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl Alignment {
    fn apply(&self, p: &[f32; 3]) -> Vector3<f64> {
        self.scale * self.rotation * Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) + self.translation
    }

    fn identity() -> Self {
        Alignment { rotation: Matrix3::identity(), scale: 1.0, translation: Vector3::zeros() }
    }
}

fn points(js: &JointSet) -> Vec<Vector3<f64>> {
    js.positions.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
}

fn centroid(ps: &[Vector3<f64>]) -> Vector3<f64> {
    ps.iter().sum::<Vector3<f64>>() / ps.len() as f64
}

/// Least-squares similarity (or rigid, with `with_scale = false`) transform
/// taking `pred` onto `gt`, with the reflection removed.
pub fn procrustes(pred: &JointSet, gt: &JointSet, with_scale: bool) -> Result<Alignment> {
    check_counts(pred, gt)?;
    let (x, y) = (points(pred), points(gt));
    if x.len() < 3 {
        return Err(Error::RankDeficient);
    }
    let (mx, my) = (centroid(&x), centroid(&y));
    let n = x.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    let mut spread_x = Matrix3::zeros();
    let mut spread_y = Matrix3::zeros();
    for (a, b) in x.iter().zip(&y) {
        let (da, db) = (a - mx, b - my);
        cov += db * da.transpose();
        spread_x += da * da.transpose();
        spread_y += db * db.transpose();
        var_x += da.norm_squared();
    }
    cov /= n;
    var_x /= n;
    for spread in [spread_x, spread_y] {
        let s = spread.symmetric_eigenvalues();
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        // collinear or coincident points leave the rotation undetermined
        if !(s[1] > 1e-12 * s[0].max(1e-300)) {
            return Err(Error::RankDeficient);
        }
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = if (u.determinant() * v_t.determinant()) < 0.0 { -1.0 } else { 1.0 };
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * s * v_t;
    let sv = svd.singular_values;
    let scale = if with_scale { (sv[0] + sv[1] + d * sv[2]) / var_x } else { 1.0 };
    let translation = my - scale * rotation * mx;
    Ok(Alignment { rotation, scale, translation })
}

/// Result of [`pa_mpjpe`]; `fallback` marks a rank-deficient input aligned by
/// translation only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaResult {
    pub mm: f64,
    pub fallback: bool,
}

/// MPJPE after similarity alignment. The least-squares alignment minimizes
/// squared error, not mean distance, so the identity and centroid-matching
/// transforms (both in the same group) are also tried and the best is kept.
pub fn pa_mpjpe(pred: &JointSet, gt: &JointSet, with_scale: bool) -> Result<PaResult> {
    check_counts(pred, gt)?;
    let y = points(gt);
    let shift = centroid(&y) - centroid(&points(pred));
    let centroid_match = Alignment { translation: shift, ..Alignment::identity() };
    let (best_ls, fallback) = match procrustes(pred, gt, with_scale) {
        Ok(a) => (Some(a), false),
        Err(Error::RankDeficient) => (None, true),
        Err(e) => return Err(e),
    };
    let err = |a: &Alignment| {
        let total: f64 = pred.positions.iter().zip(&y).map(|(p, q)| (a.apply(p) - q).norm()).sum();
        1000.0 * total / pred.len() as f64
    };
    let mm = [Some(Alignment::identity()), Some(centroid_match), best_ls]
        .iter()
        .flatten()
        .map(err)
        .fold(f64::INFINITY, f64::min);
    Ok(PaResult { mm, fallback })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub id: u64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pa_fallback: bool,
    pub flagged: bool,
}

/// Scores of one prediction set. MPJPE is measured after centering both
/// skeletons on the pelvis; PA-MPJPE uses the same centered joints, so the
/// identity alignment keeps it at or below MPJPE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub row: String,
    pub seed: Option<u64>,
    pub n_scenes: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub flagged: usize,
    pub config_hash: String,
    pub per_scene: Vec<SceneScore>,
}

pub fn evaluate(
    row: &str,
    seed: Option<u64>,
    preds: &[PoseParams],
    flagged: &[bool],
    records: &[SceneRecord],
    template: &BodyTemplate,
    pa_scale: bool,
    config_hash: &str,
) -> Result<EvalReport> {
    if preds.len() != records.len() || flagged.len() != records.len() {
        return Err(Error::shape("evaluate", format!("{} predictions for {} scenes", preds.len(), records.len())));
    }
    if records.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let per_scene: Vec<SceneScore> = preds
        .par_iter()
        .zip(records.par_iter())
        .zip(flagged.par_iter())
        .map(|((p, r), &flag)| {
            let pred = forward_kinematics(p, template)?.joints.centered_on(PELVIS);
            let gt = forward_kinematics(&r.gt_params, template)?.joints.centered_on(PELVIS);
            let pa = pa_mpjpe(&pred, &gt, pa_scale)?;
            Ok(SceneScore { id: r.id, mpjpe_mm: mpjpe(&pred, &gt)?, pa_mpjpe_mm: pa.mm, pa_fallback: pa.fallback, flagged: flag })
        })
        .collect::<Result<_>>()?;
    let n = per_scene.len() as f64;
    Ok(EvalReport {
        row: row.to_string(),
        seed,
        n_scenes: per_scene.len(),
        mpjpe_mm: per_scene.iter().map(|s| s.mpjpe_mm).sum::<f64>() / n,
        pa_mpjpe_mm: per_scene.iter().map(|s| s.pa_mpjpe_mm).sum::<f64>() / n,
        flagged: per_scene.iter().filter(|s| s.flagged).count(),
        config_hash: config_hash.to_string(),
        per_scene,
    })
}

/// Trained models needed to refine and score scenes.
pub struct Models {
    pub regressor: RegressorNet,
    pub vq: PoseVqvae,
    pub text: TextEncoder,
    pub denoiser: Denoiser,
}

impl Models {
    /// Regressor outputs and text latents for each record.
    pub fn contexts<'a>(&self, records: &'a [SceneRecord]) -> Result<Vec<SceneCtx<'a>>> {
        let preds = self.regressor.predict_records(records)?;
        preds
            .into_iter()
            .zip(records)
            .map(|(init, record)| Ok(SceneCtx { record, init, z_text: self.text.embed_text(&record.tokens)? }))
            .collect()
    }

    pub fn guide<'a>(&'a self, template: &'a BodyTemplate) -> Guide<'a> {
        Guide { template, vq: &self.vq, cosine: self.denoiser.cfg.cosine }
    }

    /// Refined poses and per-scene flags under `mask`.
    pub fn refine(&self, scenes: &[SceneCtx], template: &BodyTemplate, mask: Mask, seed: u64) -> Result<(Vec<PoseParams>, Vec<bool>)> {
        let refs: Vec<&SceneCtx> = scenes.iter().collect();
        let out = refine_batch(&refs, &self.denoiser, &self.denoiser.cfg, &self.guide(template), &RefineOptions::new(mask, seed))?;
        Ok(out.into_iter().map(|r| (r.params, r.flags.any())).unzip())
    }
}

/// The diffusion baseline started from the rest pose; the regressor's β and
/// translation are kept so the body stays in front of the camera.
pub fn gaussian_contexts<'a>(scenes: &[SceneCtx<'a>]) -> Vec<SceneCtx<'a>> {
    scenes
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.init.theta = identity_theta();
            s
        })
        .collect()
}

/// One table row: a condition setting averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub seeds: Vec<u64>,
    pub n_scenes: usize,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    /// Flagged scenes summed over seeds.
    pub flags: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub config: serde_json::Value,
    pub rows: Vec<AblationRow>,
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    pub fn row(&self, mask: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mask == mask)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mask,seed,n_scenes,mpjpe_mm,pa_mpjpe_mm,flags\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!("{},{},{},{:.4},{:.4},{}\n", r.mask, seeds.join(";"), r.n_scenes, r.mpjpe_mm, r.pa_mpjpe_mm, r.flags));
        }
        out
    }
}

fn average(name: &str, seeds: &[u64], reports: &[EvalReport]) -> AblationRow {
    let k = reports.len() as f64;
    AblationRow {
        mask: name.to_string(),
        seeds: seeds.to_vec(),
        n_scenes: reports[0].n_scenes,
        mpjpe_mm: reports.iter().map(|r| r.mpjpe_mm).sum::<f64>() / k,
        pa_mpjpe_mm: reports.iter().map(|r| r.pa_mpjpe_mm).sum::<f64>() / k,
        flags: reports.iter().map(|r| r.flagged).sum(),
    }
}

/// Settings shared by every row of an ablation.
pub struct AblationSetup<'a> {
    pub template: &'a BodyTemplate,
    pub seeds: &'a [u64],
    pub pa_scale: bool,
    pub config_hash: &'a str,
}

fn seeded_row(
    name: &str,
    scenes: &[SceneCtx],
    mask: Mask,
    records: &[SceneRecord],
    models: &Models,
    setup: &AblationSetup,
) -> Result<(AblationRow, Vec<EvalReport>)> {
    let mut reports = Vec::with_capacity(setup.seeds.len());
    for &seed in setup.seeds {
        let (preds, flags) = models.refine(scenes, setup.template, mask, seed)?;
        let report = evaluate(name, Some(seed), &preds, &flags, records, setup.template, setup.pa_scale, setup.config_hash)?;
        log::info!("{name} seed {seed}: MPJPE {:.1} mm, PA-MPJPE {:.1} mm", report.mpjpe_mm, report.pa_mpjpe_mm);
        reports.push(report);
    }
    Ok((average(name, setup.seeds, &reports), reports))
}

/// Rows `gaussian`, `init`, then one per mask. The initial prediction does
/// not depend on the seed and is scored once.
pub fn run_ablation(
    records: &[SceneRecord],
    models: &Models,
    masks: &[Mask],
    setup: &AblationSetup,
    config: serde_json::Value,
) -> Result<AblationTable> {
    if setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let scenes = models.contexts(records)?;
    let mut rows = Vec::with_capacity(masks.len() + 2);
    let mut reports = Vec::new();

    let (row, batch) = seeded_row("gaussian", &gaussian_contexts(&scenes), Mask::All, records, models, setup)?;
    rows.push(row);
    reports.extend(batch);

    let init: Vec<PoseParams> = scenes.iter().map(|s| s.init.clone()).collect();
    let report =
        evaluate("init", None, &init, &vec![false; records.len()], records, setup.template, setup.pa_scale, setup.config_hash)?;
    log::info!("init: MPJPE {:.1} mm, PA-MPJPE {:.1} mm", report.mpjpe_mm, report.pa_mpjpe_mm);
    rows.push(average("init", setup.seeds, std::slice::from_ref(&report)));
    reports.push(report);

    for &m in masks {
        let (row, batch) = seeded_row(m.name(), &scenes, m, records, models, setup)?;
        rows.push(row);
        reports.extend(batch);
    }
    Ok(AblationTable { config_hash: setup.config_hash.to_string(), config, rows, reports })
}
