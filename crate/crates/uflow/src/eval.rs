//! Test-split evaluation: SNR of the backprojection, the U-Net point
//! estimate and the posterior MMSE, plus the left/right UQ asymmetry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uflow_core::adjoint::standardize;
use uflow_core::flow::CondFlow;
use uflow_core::posterior::{sample_posterior, snr_db, uq_asymmetry, uq_ratio, PosteriorEnsemble, SNR_FORMULA};
use uflow_core::records::mix_seed;
use uflow_core::unet::UNet;
use uflow_core::Tensor;

use crate::checkpoint::check_compatible;
use crate::dataset::{Dataset, StoredRecord};
use crate::error::{Error, Result};

/// How the backprojection is turned into a speed map for its SNR.
pub const BP_ESTIMATE: &str = "c_bg + mean + std * standardize(bp), with (mean, std) the training-set contrast statistics \
     (the same affine map that turns U-Net outputs into speeds)";

/// Diagnostic companion of [`BP_ESTIMATE`].
pub const BP_BEST_GAIN: &str = "c_bg + a * bp with the least-squares optimal scalar a per scene (an upper bound for any rescaled BP)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub index: usize,
    pub seed: u64,
    pub snr_bp: f64,
    pub snr_bp_best_gain: f64,
    pub snr_unet: f64,
    pub snr_mmse: f64,
    /// SNR of the first posterior sample alone.
    pub snr_single_sample: f64,
    /// Left-half over right-half mean UQ; `None` for a degenerate ensemble.
    pub uq_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub snr_formula: String,
    pub bp_estimate: String,
    pub bp_best_gain: String,
    pub view: String,
    pub seed: u64,
    pub samples: usize,
    pub config_hash: String,
    pub data_hash: String,
    pub unet_params_sha256: String,
    pub flow_params_sha256: String,
    pub n_test: usize,
    pub mean_snr_bp: f64,
    pub mean_snr_bp_best_gain: f64,
    pub mean_snr_unet: f64,
    pub mean_snr_mmse: f64,
    pub mean_snr_single_sample: f64,
    /// Mean per-scene UQ ratio; `None` if any ensemble was degenerate.
    pub uq_asymmetry: Option<f64>,
    pub scenes: Vec<SceneResult>,
}

/// Everything needed to evaluate, already loaded.
pub struct Models<'a> {
    pub unet: &'a UNet,
    pub flow: &'a CondFlow,
    pub unet_sha256: &'a str,
    pub flow_sha256: &'a str,
}

/// Speed-map reading of a raw backprojection through the U-Net's target map.
pub fn bp_estimate(unet: &UNet, bp: &Tensor) -> Tensor {
    unet.scaling.to_speed(&standardize(bp).0)
}

fn best_gain_estimate(bp: &Tensor, truth: &Tensor, c_bg: f64) -> Tensor {
    let num: f64 = bp.data().iter().zip(truth.data()).map(|(b, t)| b * (t - c_bg)).sum();
    let den = bp.norm_sq();
    let a = if den > 0.0 { num / den } else { 0.0 };
    bp.map(|b| c_bg + a * b)
}

/// Posterior ensemble of one record; the draw depends only on `seed` and
/// the record seed.
pub fn posterior_for(models: &Models, rec: &StoredRecord, samples: usize, seed: u64) -> Result<PosteriorEnsemble> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, rec.entry.seed));
    Ok(sample_posterior(models.unet, models.flow, &rec.input(), samples, &mut rng)?)
}

pub fn evaluate_scene(models: &Models, rec: &StoredRecord, samples: usize, seed: u64) -> Result<(SceneResult, PosteriorEnsemble)> {
    let c_bg = models.unet.scaling.c_background;
    let n = rec.speed.shape()[0];
    let truth = &rec.speed;
    let unet = models.unet.predict(&rec.input())?.reshape(&[n, n])?;
    let ens = posterior_for(models, rec, samples, seed)?;
    let result = SceneResult {
        index: rec.entry.index,
        seed: rec.entry.seed,
        snr_bp: snr_db(&bp_estimate(models.unet, &rec.bp), truth, c_bg)?,
        snr_bp_best_gain: snr_db(&best_gain_estimate(&rec.bp, truth, c_bg), truth, c_bg)?,
        snr_unet: snr_db(&unet, truth, c_bg)?,
        snr_mmse: snr_db(&ens.mmse, truth, c_bg)?,
        snr_single_sample: snr_db(&ens.samples[0], truth, c_bg)?,
        uq_ratio: uq_ratio(&ens.uq).ok(),
    };
    Ok((result, ens))
}

/// Evaluate every test record.
pub fn evaluate(ds: &Dataset, models: &Models, samples: usize, seed: u64) -> Result<EvalReport> {
    check_compatible(models.unet, models.flow)?;
    if ds.test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let mut scenes = Vec::with_capacity(ds.test.len());
    let mut uq_maps = Vec::with_capacity(ds.test.len());
    for (i, rec) in ds.test.iter().enumerate() {
        let (res, ens) = evaluate_scene(models, rec, samples, seed)?;
        log::debug!("scene {}: {res:?}", rec.entry.index);
        if (i + 1) % 10 == 0 {
            log::info!("evaluated {}/{}", i + 1, ds.test.len());
        }
        scenes.push(res);
        uq_maps.push(ens.uq);
    }
    let mean = |f: fn(&SceneResult) -> f64| scenes.iter().map(f).sum::<f64>() / scenes.len() as f64;
    let cfg = &ds.manifest.config;
    Ok(EvalReport {
        snr_formula: SNR_FORMULA.to_string(),
        bp_estimate: BP_ESTIMATE.to_string(),
        bp_best_gain: BP_BEST_GAIN.to_string(),
        view: serde_json::to_value(cfg.data.view)?.as_str().unwrap_or_default().to_string(),
        seed,
        samples,
        config_hash: cfg.hash(),
        data_hash: ds.manifest.data_hash.clone(),
        unet_params_sha256: models.unet_sha256.to_string(),
        flow_params_sha256: models.flow_sha256.to_string(),
        n_test: scenes.len(),
        mean_snr_bp: mean(|s| s.snr_bp),
        mean_snr_bp_best_gain: mean(|s| s.snr_bp_best_gain),
        mean_snr_unet: mean(|s| s.snr_unet),
        mean_snr_mmse: mean(|s| s.snr_mmse),
        mean_snr_single_sample: mean(|s| s.snr_single_sample),
        uq_asymmetry: uq_asymmetry(&uq_maps).ok(),
        scenes,
    })
}

/// Canonical JSON text of a report (what `evaluate` writes to disk).
pub fn report_json(report: &EvalReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}
