//! Posterior sampling with the U-Net decoder and the conditional flow,
//! ensemble statistics and reconstruction quality metrics.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::flow::CondFlow;
use crate::tensor::Tensor;
use crate::unet::UNet;

/// Default number of posterior draws per measurement.
pub const DEFAULT_SAMPLES: usize = 25;

/// Reported in place of `+∞` when the estimate equals the truth.
pub const SNR_CAP_DB: f64 = 300.0;

/// Human-readable definition of [`snr_db`], stored with every report.
pub const SNR_FORMULA: &str =
    "SNR = 10*log10(||c_true - c_bg||^2 / ||c_true - c_est||^2), contrast energy over error energy, capped at 300 dB";

/// UQ denominators are clamped to this fraction of the background speed.
pub const UQ_FLOOR_FRACTION: f64 = 1e-3;

/// Posterior draws for one measurement with their summary maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    /// Speed maps `[n, n]` in m/s.
    pub samples: Vec<Tensor>,
    /// Pixel-wise sample mean.
    pub mmse: Tensor,
    /// Pixel-wise sample standard deviation over `max(|mmse|, floor)`.
    pub uq: Tensor,
}

impl PosteriorEnsemble {
    /// Summarize at least two samples of identical shape.
    pub fn from_samples(samples: Vec<Tensor>, c_background: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(TensorError::Invalid {
                op: "posterior ensemble",
                msg: format!("uncertainty needs at least 2 samples, got {}", samples.len()),
            });
        }
        let shape = samples[0].shape().to_vec();
        if let Some(bad) = samples.iter().find(|s| s.shape() != shape.as_slice()) {
            return Err(TensorError::ShapeMismatch {
                op: "posterior ensemble",
                lhs: shape,
                rhs: bad.shape().to_vec(),
            });
        }
        let n = samples.len() as f64;
        let len = samples[0].len();
        let mut mean = alloc::vec![0.0; len];
        for s in &samples {
            for (m, v) in mean.iter_mut().zip(s.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = alloc::vec![0.0; len];
        for s in &samples {
            for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let floor = UQ_FLOOR_FRACTION * c_background;
        let uq = var
            .iter()
            .zip(&mean)
            .map(|(v, m)| libm::sqrt(v / (n - 1.0)) / libm::fabs(*m).max(floor))
            .collect();
        Ok(Self {
            mmse: Tensor::new(&shape, mean)?,
            uq: Tensor::new(&shape, uq)?,
            samples,
        })
    }
}

/// Draw `n` posterior samples for one standardized backprojection
/// `[1, 1, H, W]`: encode once, replace the coarsest latent by `f(z; y)`
/// with `z ~ N(0, I)`, and decode with the finer levels unchanged.
pub fn sample_posterior<R: Rng + ?Sized>(
    unet: &UNet,
    flow: &CondFlow,
    input: &Tensor,
    n: usize,
    rng: &mut R,
) -> Result<PosteriorEnsemble> {
    let [c, h, w] = flow.cfg.latent;
    let z = Tensor::randn(&[n, c, h, w], rng);
    let samples = decode_latents(unet, flow, input, &z)?;
    PosteriorEnsemble::from_samples(samples, unet.scaling.c_background)
}

/// Decode explicit flow inputs `z` `[n, C, h, w]` for one standardized
/// backprojection; returns `n` speed maps.
pub fn decode_latents(unet: &UNet, flow: &CondFlow, input: &Tensor, z: &Tensor) -> Result<Vec<Tensor>> {
    let (batch, _, _, _) = input.dims4()?;
    if batch != 1 {
        return Err(TensorError::Invalid {
            op: "sample posterior",
            msg: format!("expected a single measurement, got a batch of {batch}"),
        });
    }
    if flow.cfg.latent != unet.cfg.latent_shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sample posterior",
            lhs: flow.cfg.latent.to_vec(),
            rhs: unet.cfg.latent_shape().to_vec(),
        });
    }
    let n = z.shape()[0];
    let pyramid = unet.encode(input)?;
    let conds = Tensor::concat_batch(&alloc::vec![input.clone(); n])?;
    let s6 = flow.forward(z, &conds)?;
    let speeds = unet.decode(&pyramid.repeat(n)?.with_coarsest(s6))?;
    let (_, _, hh, ww) = speeds.dims4()?;
    (0..n)
        .map(|i| speeds.batch_item(i).reshape(&[hh, ww]))
        .collect()
}

/// Reconstruction SNR in dB on contrast fields; see [`SNR_FORMULA`].
pub fn snr_db(estimate: &Tensor, truth: &Tensor, c_background: f64) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "snr",
            lhs: estimate.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let signal: f64 = truth.data().iter().map(|t| (t - c_background) * (t - c_background)).sum();
    if signal == 0.0 {
        return Err(TensorError::Invalid {
            op: "snr",
            msg: "truth has no contrast; SNR is undefined".into(),
        });
    }
    let error: f64 = truth.data().iter().zip(estimate.data()).map(|(t, e)| (t - e) * (t - e)).sum();
    if error == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(signal / error)).min(SNR_CAP_DB))
}

/// Mean UQ over the left half of the image (`x < 0`) divided by the mean
/// over the right half.
pub fn uq_ratio(uq: &Tensor) -> Result<f64> {
    let (rows, cols) = match uq.shape() {
        [r, c] => (*r, *c),
        s => return Err(TensorError::Rank { op: "uq ratio", expected: 2, shape: s.to_vec() }),
    };
    let half = cols / 2;
    let (mut left, mut right) = (0.0, 0.0);
    for r in 0..rows {
        let row = &uq.data()[r * cols..(r + 1) * cols];
        left += row[..half].iter().sum::<f64>();
        right += row[cols - half..].iter().sum::<f64>();
    }
    if right == 0.0 {
        return Err(TensorError::Invalid {
            op: "uq ratio",
            msg: "right half carries no uncertainty (degenerate ensemble); ratio undefined".into(),
        });
    }
    Ok(left / right)
}

/// Per-scene [`uq_ratio`] averaged over a test set.
pub fn uq_asymmetry<'a>(maps: impl IntoIterator<Item = &'a Tensor>) -> Result<f64> {
    let ratios = maps.into_iter().map(uq_ratio).collect::<Result<Vec<_>>>()?;
    if ratios.is_empty() {
        return Err(TensorError::Invalid {
            op: "uq asymmetry",
            msg: "empty test set".into(),
        });
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}
