//! Encoder/decoder point estimator with skip connections.
//!
//! Each encoder level applies two 3x3 convolutions; all but the coarsest are
//! followed by leaky ReLU and 2x2 average pooling. The coarsest feature map
//! is left linear because it is the variable the conditional flow models.
//! The decoder upsamples, concatenates the skip connection of the same
//! level and applies two more 3x3 convolutions; a 1x1 head produces one
//! channel of standardized speed contrast.
//!
//! Inputs larger than `2^(levels-1) * coarsest` are first average-pooled so
//! the coarsest latent keeps the same spatial size at every resolution, and
//! the decoder output is upsampled back before the head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::optim::{self, Adam, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Slope of the leaky rectifier used in every network.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Input side length (square images).
    pub input_size: usize,
    /// Channels per level, finest first.
    pub channels: Vec<usize>,
    /// Spatial side of the coarsest latent.
    pub coarsest: usize,
}

impl UNetConfig {
    /// Six levels 8..256 channels with a 2x2 coarsest latent.
    pub fn standard(input_size: usize) -> Self {
        Self {
            input_size,
            channels: vec![8, 16, 32, 64, 128, 256],
            coarsest: 2,
        }
    }

    /// 64 x 64 inputs.
    pub fn desk() -> Self {
        Self::standard(64)
    }

    /// 128 x 128 inputs.
    pub fn paper() -> Self {
        Self::standard(128)
    }

    /// Same input size and coarsest side with a different channel schedule.
    pub fn with_channels(mut self, channels: &[usize]) -> Self {
        self.channels = channels.to_vec();
        self
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Side of the finest pyramid level.
    pub fn finest_size(&self) -> usize {
        self.coarsest << (self.levels() - 1)
    }

    /// Number of 2x poolings applied to the input before level 1.
    pub fn input_downsample(&self) -> Result<usize> {
        let finest = self.finest_size();
        let mut size = self.input_size;
        let mut k = 0;
        while size > finest {
            if size % 2 != 0 {
                break;
            }
            size /= 2;
            k += 1;
        }
        if size != finest {
            return Err(TensorError::Indivisible {
                op: "unet input",
                h: self.input_size,
                w: self.input_size,
                factor: finest,
            });
        }
        Ok(k)
    }

    /// `[C, h, w]` of the coarsest latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        [*self.channels.last().expect("at least one level"), self.coarsest, self.coarsest]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.coarsest == 0 {
            return Err(TensorError::Invalid {
                op: "unet config",
                msg: format!("invalid channel schedule {:?}", self.channels),
            });
        }
        self.input_downsample().map(|_| ())
    }
}

/// Maps speeds to the network's standardized contrast target and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScaling {
    pub c_background: f64,
    pub mean: f64,
    pub std: f64,
}

impl TargetScaling {
    pub fn identity(c_background: f64) -> Self {
        Self {
            c_background,
            mean: 0.0,
            std: 1.0,
        }
    }

    /// Pixel statistics of the contrast `c - c_background` over `speeds`.
    pub fn fit<'a>(speeds: impl IntoIterator<Item = &'a Tensor>, c_background: f64) -> Self {
        let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
        for t in speeds {
            for &v in t.data() {
                let d = v - c_background;
                n += 1.0;
                s += d;
                s2 += d * d;
            }
        }
        if n == 0.0 {
            return Self::identity(c_background);
        }
        let mean = s / n;
        let var = (s2 / n - mean * mean).max(0.0);
        Self {
            c_background,
            mean,
            std: if var > 0.0 { libm::sqrt(var) } else { 1.0 },
        }
    }

    pub fn to_target(&self, speed: &Tensor) -> Tensor {
        speed.map(|v| (v - self.c_background - self.mean) / self.std)
    }

    pub fn to_speed(&self, target: &Tensor) -> Tensor {
        target.map(|v| self.c_background + self.mean + self.std * v)
    }
}

/// Encoder features `s1 .. sL`, finest first, each `[N, C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPyramid {
    pub levels: Vec<Tensor>,
}

impl LatentPyramid {
    pub fn coarsest(&self) -> &Tensor {
        self.levels.last().expect("non-empty pyramid")
    }

    /// Same pyramid with the coarsest level replaced.
    pub fn with_coarsest(&self, s: Tensor) -> Self {
        let mut levels = self.levels.clone();
        *levels.last_mut().expect("non-empty pyramid") = s;
        Self { levels }
    }

    /// Repeat every level `n` times along the batch axis (input batch 1).
    pub fn repeat(&self, n: usize) -> Result<Self> {
        let levels = self
            .levels
            .iter()
            .map(|t| Tensor::concat_batch(&vec![t.clone(); n]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }
}

/// Parameters of the U-Net together with its architecture and target map.
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub scaling: TargetScaling,
    pub params: Vec<Parameter>,
}

fn he_kernel<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = libm::sqrt(gain / (c_in * k * k) as f64);
    Tensor::randn(&[c_out, c_in, k, k], rng).scale(std)
}

/// Views into the bound parameter list.
struct Bound<'a> {
    vars: &'a [Var],
}

impl Bound<'_> {
    /// `(kernel, bias)` of conv number `i`.
    fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, scaling: TargetScaling, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.channels;
        let mut params = Vec::new();
        let mut push_conv = |name: &str, c_out: usize, c_in: usize, k: usize, gain: f64, rng: &mut R| {
            params.push(Parameter::new(format!("{name}.weight"), he_kernel(c_out, c_in, k, gain, rng)));
            params.push(Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        };
        let mut c_prev = 1;
        for (l, &c) in ch.iter().enumerate() {
            push_conv(&format!("enc{}.conv1", l + 1), c, c_prev, 3, 2.0, rng);
            let gain = if l + 1 == ch.len() { 1.0 } else { 2.0 };
            push_conv(&format!("enc{}.conv2", l + 1), c, c, 3, gain, rng);
            c_prev = c;
        }
        for l in (0..ch.len() - 1).rev() {
            push_conv(&format!("dec{}.conv1", l + 1), ch[l], ch[l + 1] + ch[l], 3, 2.0, rng);
            push_conv(&format!("dec{}.conv2", l + 1), ch[l], ch[l], 3, 2.0, rng);
        }
        push_conv("head", 1, ch[0], 1, 1.0, rng);
        Ok(Self { cfg, scaling, params })
    }

    pub fn num_params(&self) -> usize {
        optim::count(&self.params)
    }

    fn conv_index_enc(l: usize, which: usize) -> usize {
        2 * l + which
    }

    fn conv_index_dec(&self, l: usize, which: usize) -> usize {
        // decoder convs are stored coarse to fine after the encoder
        let levels = self.cfg.levels();
        2 * levels + 2 * (levels - 2 - l) + which
    }

    fn conv_index_head(&self) -> usize {
        4 * self.cfg.levels() - 2
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(TensorError::ShapeMismatch {
                op: "unet input",
                lhs: x.shape().to_vec(),
                rhs: vec![1, 1, self.cfg.input_size, self.cfg.input_size],
            });
        }
        Ok(())
    }

    fn conv_act(tape: &mut Tape, b: &Bound, i: usize, x: Var, act: bool) -> Result<Var> {
        let (k, bias) = b.conv(i);
        let y = tape.conv2d(x, k, Some(bias), 1, 1)?;
        Ok(if act { tape.leaky_relu(y, LEAKY_SLOPE) } else { y })
    }

    /// Encoder on a tape; returns `s1 .. sL`.
    pub fn encode_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Vec<Var>> {
        self.check_input(tape.value(x))?;
        let b = Bound { vars };
        let mut h = x;
        for _ in 0..self.cfg.input_downsample()? {
            h = tape.pool_down(h)?;
        }
        let levels = self.cfg.levels();
        let mut out = Vec::with_capacity(levels);
        for l in 0..levels {
            if l > 0 {
                h = tape.pool_down(h)?;
            }
            h = Self::conv_act(tape, &b, Self::conv_index_enc(l, 0), h, true)?;
            h = Self::conv_act(tape, &b, Self::conv_index_enc(l, 1), h, l + 1 < levels)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Decoder on a tape; returns standardized contrast `[N, 1, H, W]`.
    pub fn decode_on(&self, tape: &mut Tape, vars: &[Var], pyramid: &[Var]) -> Result<Var> {
        let levels = self.cfg.levels();
        if pyramid.len() != levels {
            return Err(TensorError::Invalid {
                op: "unet decode",
                msg: format!("expected {levels} pyramid levels, got {}", pyramid.len()),
            });
        }
        for (l, &s) in pyramid.iter().enumerate() {
            let (_, c, h, w) = tape.value(s).dims4()?;
            let side = self.cfg.coarsest << (levels - 1 - l);
            if c != self.cfg.channels[l] || h != side || w != side {
                return Err(TensorError::ShapeMismatch {
                    op: "unet decode",
                    lhs: tape.value(s).shape().to_vec(),
                    rhs: vec![tape.value(s).shape()[0], self.cfg.channels[l], side, side],
                });
            }
        }
        let b = Bound { vars };
        let mut d = pyramid[levels - 1];
        for l in (0..levels - 1).rev() {
            let up = tape.upsample(d)?;
            let cat = tape.concat(&[up, pyramid[l]])?;
            d = Self::conv_act(tape, &b, self.conv_index_dec(l, 0), cat, true)?;
            d = Self::conv_act(tape, &b, self.conv_index_dec(l, 1), d, true)?;
        }
        for _ in 0..self.cfg.input_downsample()? {
            d = tape.upsample(d)?;
        }
        let (k, bias) = b.conv(self.conv_index_head());
        tape.conv2d(d, k, Some(bias), 1, 0)
    }

    /// Feature pyramid of standardized backprojections `[N, 1, H, W]`.
    pub fn encode(&self, x: &Tensor) -> Result<LatentPyramid> {
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, false);
        let xv = tape.constant(x.clone());
        let levels = self.encode_on(&mut tape, &vars, xv)?;
        Ok(LatentPyramid {
            levels: levels.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    /// Standardized contrast predicted from a pyramid.
    pub fn decode_standardized(&self, pyramid: &LatentPyramid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, false);
        let pv: Vec<Var> = pyramid.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.decode_on(&mut tape, &vars, &pv)?;
        Ok(tape.value(out).clone())
    }

    /// Speed estimate in m/s, `[N, 1, H, W]`.
    pub fn decode(&self, pyramid: &LatentPyramid) -> Result<Tensor> {
        Ok(self.scaling.to_speed(&self.decode_standardized(pyramid)?))
    }

    /// Point estimate `dec(enc(x))` in m/s.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Mean squared error between prediction and standardized target.
    pub fn mse_on(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
        let n = tape.value(pred).len() as f64;
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let total = tape.sum(sq);
        Ok(tape.scale(total, 1.0 / n))
    }

    /// Loss and gradients for one batch; gradients are accumulated into the
    /// parameters.
    pub fn accumulate_gradients(&mut self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, true);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(target.clone());
        let pyr = self.encode_on(&mut tape, &vars, xv)?;
        let pred = self.decode_on(&mut tape, &vars, &pyr)?;
        let loss = Self::mse_on(&mut tape, pred, tv)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!("unet loss {value}")));
        }
        let mut grads = tape.backward(loss)?;
        optim::collect_grads(&mut self.params, &vars, &mut grads)?;
        Ok(value)
    }

    /// One Adam step on a batch of standardized inputs and targets.
    pub fn train_step(&mut self, adam: &Adam, x: &Tensor, target: &Tensor) -> Result<f64> {
        let loss = self.accumulate_gradients(x, target)?;
        adam.step(self.params.iter_mut())?;
        Ok(loss)
    }

    /// MSE of the current parameters on a batch, without gradients.
    pub fn loss(&self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let pred = self.decode_standardized(&self.encode(x)?)?;
        let d = pred.zip_map(target, |a, b| a - b)?;
        Ok(d.norm_sq() / d.len() as f64)
    }
}
