//! Conditional Glow over the coarsest U-Net latent.
//!
//! The normalizing direction `s -> z` ([`CondFlow::inverse`]) runs the
//! blocks in order; each block is
//!
//! 1. actnorm `y = scale ⊙ (x + bias)` per channel,
//! 2. an invertible 1x1 convolution `y = W x`,
//! 3. an affine coupling: the second half of the channels becomes
//!    `b ⊙ exp(log_s) + t` where `(log_s, t)` come from a subnetwork that
//!    sees the first half and the conditioning features, and
//!    `log_s = 2 tanh(raw / 2)` keeps the scale inside `[e⁻², e²]`.
//!
//! The generative direction `z -> s` ([`CondFlow::forward`]) undoes the
//! blocks in reverse order. Conditioning features come from a small strided
//! encoder of the backprojection, shared by every block.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::linalg::Lu;
use crate::optim::{self, Adam, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::unet::LEAKY_SLOPE;

/// Smallest admissible `|det W|` of a mixing matrix.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// `[C, h, w]` of the modelled latent; `C` must be even.
    pub latent: [usize; 3],
    pub blocks: usize,
    /// Width of the coupling subnetworks.
    pub hidden: usize,
    /// Side length of the conditioning image.
    pub cond_size: usize,
    /// Output channels of the four strided conditioning convolutions.
    pub cond_channels: [usize; 4],
}

impl FlowConfig {
    /// 24 blocks over a `256 x 2 x 2` latent conditioned on `cond_size`
    /// backprojections.
    pub fn standard(cond_size: usize) -> Self {
        Self {
            latent: [256, 2, 2],
            blocks: 24,
            hidden: 112,
            cond_size,
            cond_channels: [16, 32, 64, 64],
        }
    }

    pub fn desk() -> Self {
        Self::standard(64)
    }

    pub fn paper() -> Self {
        Self::standard(128)
    }

    /// Flattened latent dimension `d`.
    pub fn dim(&self) -> usize {
        self.latent.iter().product()
    }

    fn half(&self) -> usize {
        self.latent[0] / 2
    }

    fn cond_out(&self) -> usize {
        self.cond_channels[3]
    }

    /// Average poolings after the strided convolutions.
    fn cond_pools(&self) -> Result<usize> {
        let mut size = self.cond_size;
        for _ in 0..4 {
            size = size.div_ceil(2);
        }
        let mut pools = 0;
        while size > self.latent[1] && size % 2 == 0 {
            size /= 2;
            pools += 1;
        }
        if size != self.latent[1] || self.latent[1] != self.latent[2] {
            return Err(TensorError::Invalid {
                op: "flow config",
                msg: format!(
                    "conditioning size {} cannot be reduced to the latent {:?}",
                    self.cond_size, self.latent
                ),
            });
        }
        Ok(pools)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent[0] < 2 || self.latent[0] % 2 != 0 || self.blocks == 0 || self.hidden == 0 {
            return Err(TensorError::Invalid {
                op: "flow config",
                msg: format!("invalid latent {:?} / blocks {} / hidden {}", self.latent, self.blocks, self.hidden),
            });
        }
        self.cond_pools().map(|_| ())
    }
}

/// Parameter indices of one block, relative to its first parameter.
const AN_SCALE: usize = 0;
const AN_BIAS: usize = 1;
const MIX: usize = 2;
const SUB1: usize = 3;
const SUB2: usize = 5;
const SUB3: usize = 7;
const PER_BLOCK: usize = 9;
const COND_PARAMS: usize = 8;

/// Conditional Glow parameters.
#[derive(Debug, Clone)]
pub struct CondFlow {
    pub cfg: FlowConfig,
    pub params: Vec<Parameter>,
}

/// `z` with the per-sample `log|det ∂z/∂s|`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseOutput {
    pub z: Tensor,
    pub logdet: Vec<f64>,
}

fn normal_kernel<R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, rng).scale(libm::sqrt(gain / fan_in as f64))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_rotation<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Tensor {
    let g = Tensor::randn(&[c, c], rng);
    let mut q: Vec<f64> = g.into_data();
    for i in 0..c {
        for j in 0..i {
            let d: f64 = (0..c).map(|k| q[i * c + k] * q[j * c + k]).sum();
            for k in 0..c {
                q[i * c + k] -= d * q[j * c + k];
            }
        }
        let n = libm::sqrt((0..c).map(|k| q[i * c + k] * q[i * c + k]).sum());
        for k in 0..c {
            q[i * c + k] /= n;
        }
    }
    Tensor::new(&[c, c, 1, 1], q).expect("c*c entries")
}

/// Everything needed to run one block, taken from bound variables.
#[derive(Clone, Copy)]
struct BlockVars {
    scale: Var,
    bias: Var,
    mix: Var,
    sub: [(Var, Var); 3],
}

impl CondFlow {
    /// Identity-initialized flow: unit actnorm, `W = I`, zero coupling output.
    pub fn identity<R: Rng + ?Sized>(cfg: FlowConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, rng, false)
    }

    /// Training initialization: random rotations for the mixing matrices,
    /// couplings still start at the identity.
    pub fn new<R: Rng + ?Sized>(cfg: FlowConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, rng, true)
    }

    fn build<R: Rng + ?Sized>(cfg: FlowConfig, rng: &mut R, rotate: bool) -> Result<Self> {
        cfg.validate()?;
        let mut params = Vec::new();
        let mut c_prev = 1;
        for (i, &c) in cfg.cond_channels.iter().enumerate() {
            params.push(Parameter::new(format!("cond{}.weight", i + 1), normal_kernel(&[c, c_prev, 3, 3], 2.0, rng)));
            params.push(Parameter::new(format!("cond{}.bias", i + 1), Tensor::zeros(&[c])));
            c_prev = c;
        }
        let [c, _, _] = cfg.latent;
        let (half, h, co) = (cfg.half(), cfg.hidden, cfg.cond_out());
        for b in 0..cfg.blocks {
            params.push(Parameter::new(format!("block{b}.actnorm.scale"), Tensor::ones(&[c])));
            params.push(Parameter::new(format!("block{b}.actnorm.bias"), Tensor::zeros(&[c])));
            let w = if rotate {
                random_rotation(c, rng)
            } else {
                Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 })
            };
            params.push(Parameter::new(format!("block{b}.mix"), w));
            params.push(Parameter::new(format!("block{b}.sub1.weight"), normal_kernel(&[h, half + co, 3, 3], 2.0, rng)));
            params.push(Parameter::new(format!("block{b}.sub1.bias"), Tensor::zeros(&[h])));
            params.push(Parameter::new(format!("block{b}.sub2.weight"), normal_kernel(&[h, h, 1, 1], 2.0, rng)));
            params.push(Parameter::new(format!("block{b}.sub2.bias"), Tensor::zeros(&[h])));
            params.push(Parameter::new(format!("block{b}.sub3.weight"), Tensor::zeros(&[c, h, 1, 1])));
            params.push(Parameter::new(format!("block{b}.sub3.bias"), Tensor::zeros(&[c])));
        }
        Ok(Self { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        optim::count(&self.params)
    }

    fn block_base(b: usize) -> usize {
        COND_PARAMS + b * PER_BLOCK
    }

    /// Mutable access to a block's parameters by offset (tests, init).
    fn block_param(&mut self, b: usize, off: usize) -> &mut Parameter {
        &mut self.params[Self::block_base(b) + off]
    }

    /// The `[C, C, 1, 1]` mixing matrix of block `b`.
    pub fn mixing(&self, b: usize) -> &Tensor {
        &self.params[Self::block_base(b) + MIX].value
    }

    pub fn mixing_mut(&mut self, b: usize) -> &mut Tensor {
        &mut self.block_param(b, MIX).value
    }

    /// `(scale, bias)` of block `b`'s actnorm.
    pub fn actnorm(&self, b: usize) -> (&Tensor, &Tensor) {
        let base = Self::block_base(b);
        (&self.params[base + AN_SCALE].value, &self.params[base + AN_BIAS].value)
    }

    /// Mutable coupling output layer `(weight, bias)` of block `b`.
    pub fn coupling_head_mut(&mut self, b: usize) -> (&mut Tensor, &mut Tensor) {
        let base = Self::block_base(b);
        let (w, rest) = self.params[base + SUB3..].split_at_mut(1);
        (&mut w[0].value, &mut rest[0].value)
    }

    pub fn actnorm_mut(&mut self, b: usize) -> (&mut Tensor, &mut Tensor) {
        let base = Self::block_base(b);
        let (s, rest) = self.params[base + AN_SCALE..].split_at_mut(1);
        (&mut s[0].value, &mut rest[0].value)
    }

    fn block_vars(vars: &[Var], b: usize) -> BlockVars {
        let base = Self::block_base(b);
        let v = |o: usize| vars[base + o];
        BlockVars {
            scale: v(AN_SCALE),
            bias: v(AN_BIAS),
            mix: v(MIX),
            sub: [(v(SUB1), v(SUB1 + 1)), (v(SUB2), v(SUB2 + 1)), (v(SUB3), v(SUB3 + 1))],
        }
    }

    fn check_latent(&self, s: &Tensor) -> Result<usize> {
        let (n, c, h, w) = s.dims4()?;
        if [c, h, w] != self.cfg.latent {
            return Err(TensorError::ShapeMismatch {
                op: "flow latent",
                lhs: s.shape().to_vec(),
                rhs: vec![n, self.cfg.latent[0], self.cfg.latent[1], self.cfg.latent[2]],
            });
        }
        Ok(n)
    }

    /// Conditioning features `[N, Cc, h, w]` of standardized backprojections.
    pub fn cond_features_on(&self, tape: &mut Tape, vars: &[Var], y: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(y).dims4()?;
        if c != 1 || h != self.cfg.cond_size || w != self.cfg.cond_size {
            return Err(TensorError::ShapeMismatch {
                op: "flow condition",
                lhs: tape.value(y).shape().to_vec(),
                rhs: vec![tape.value(y).shape()[0], 1, self.cfg.cond_size, self.cfg.cond_size],
            });
        }
        let mut x = y;
        for i in 0..4 {
            x = tape.conv2d(x, vars[2 * i], Some(vars[2 * i + 1]), 2, 1)?;
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
        for _ in 0..self.cfg.cond_pools()? {
            x = tape.pool_down(x)?;
        }
        Ok(x)
    }

    /// `(log_s, t)` of a coupling given the untouched half.
    fn coupling_on(&self, tape: &mut Tape, bv: &BlockVars, a: Var, feats: Var) -> Result<(Var, Var)> {
        let half = self.cfg.half();
        let inp = tape.concat(&[a, feats])?;
        let h = tape.conv2d(inp, bv.sub[0].0, Some(bv.sub[0].1), 1, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = tape.conv2d(h, bv.sub[1].0, Some(bv.sub[1].1), 1, 0)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let o = tape.conv2d(h, bv.sub[2].0, Some(bv.sub[2].1), 1, 0)?;
        let raw = tape.slice_channels(o, 0, half)?;
        let t = tape.slice_channels(o, half, half)?;
        let r = tape.scale(raw, 0.5);
        let th = tape.tanh(r);
        Ok((tape.scale(th, 2.0), t))
    }

    /// One block in the normalizing direction. Returns the output, the
    /// sample-independent log-determinant (scalar) and the per-sample
    /// coupling log-determinant (`[N]`).
    fn block_inverse_on(&self, tape: &mut Tape, block: usize, bv: &BlockVars, x: Var, feats: Var) -> Result<(Var, Var, Var)> {
        let [_, h, w] = self.cfg.latent;
        let half = self.cfg.half();
        let hw = (h * w) as f64;
        let x = tape.channel_affine(x, bv.scale, bv.bias)?;
        let an = tape.log_abs_sum(bv.scale);
        let x = tape.conv2d(x, bv.mix, None, 1, 0)?;
        let mix = tape.log_abs_det(bv.mix).map_err(|e| match e {
            TensorError::Singular { det_abs } => TensorError::SingularBlock { block, det_abs },
            other => other,
        })?;
        let det_abs = libm::exp(tape.value(mix).item());
        if !(det_abs > MIN_ABS_DET) {
            return Err(TensorError::SingularBlock { block, det_abs });
        }
        let shared = tape.add(an, mix)?;
        let shared = tape.scale(shared, hw);
        let a = tape.slice_channels(x, 0, half)?;
        let b = tape.slice_channels(x, half, half)?;
        let (log_s, t) = self.coupling_on(tape, bv, a, feats)?;
        let es = tape.exp(log_s);
        let bs = tape.mul(b, es)?;
        let b2 = tape.add(bs, t)?;
        let out = tape.concat(&[a, b2])?;
        let coupling = tape.sum_per_sample(log_s)?;
        Ok((out, shared, coupling))
    }

    /// Normalizing direction on a tape. Returns `z`, the scalar shared
    /// log-determinant and the per-sample coupling log-determinants.
    pub fn inverse_on(&self, tape: &mut Tape, vars: &[Var], s: Var, y: Var) -> Result<(Var, Var, Var)> {
        self.check_latent(tape.value(s))?;
        let feats = self.cond_features_on(tape, vars, y)?;
        let mut x = s;
        let mut shared = None;
        let mut coupling = None;
        for b in 0..self.cfg.blocks {
            let bv = Self::block_vars(vars, b);
            let (nx, sh, cp) = self.block_inverse_on(tape, b, &bv, x, feats)?;
            x = nx;
            shared = Some(match shared {
                Some(acc) => tape.add(acc, sh)?,
                None => sh,
            });
            coupling = Some(match coupling {
                Some(acc) => tape.add(acc, cp)?,
                None => cp,
            });
        }
        Ok((x, shared.expect("at least one block"), coupling.expect("at least one block")))
    }

    /// `z = f⁻¹(s; y)` with per-sample `log|det ∂z/∂s|`.
    pub fn inverse(&self, s: &Tensor, y: &Tensor) -> Result<InverseOutput> {
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, false);
        let sv = tape.constant(s.clone());
        let yv = tape.constant(y.clone());
        let (z, shared, coupling) = self.inverse_on(&mut tape, &vars, sv, yv)?;
        let sh = tape.value(shared).item();
        Ok(InverseOutput {
            z: tape.value(z).clone(),
            logdet: tape.value(coupling).data().iter().map(|c| c + sh).collect(),
        })
    }

    /// `s = f(z; y)`, the exact inverse of [`CondFlow::inverse`].
    pub fn forward(&self, z: &Tensor, y: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let c = self.cfg.latent[0];
        let half = self.cfg.half();
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, false);
        let inverses = (0..self.cfg.blocks)
            .map(|b| {
                let lu = Lu::new(self.mixing(b).data(), c).map_err(|_| TensorError::SingularBlock { block: b, det_abs: 0.0 })?;
                let det_abs = libm::exp(lu.log_abs_det());
                if !(det_abs > MIN_ABS_DET) {
                    return Err(TensorError::SingularBlock { block: b, det_abs });
                }
                Tensor::new(&[c, c, 1, 1], lu.inverse())
            })
            .collect::<Result<Vec<_>>>()?;
        let yv = tape.constant(y.clone());
        let feats = self.cond_features_on(&mut tape, &vars, yv)?;
        let mut x = tape.constant(z.clone());
        for b in (0..self.cfg.blocks).rev() {
            let bv = Self::block_vars(&vars, b);
            // undo the coupling
            let a = tape.slice_channels(x, 0, half)?;
            let b2 = tape.slice_channels(x, half, half)?;
            let (log_s, t) = self.coupling_on(&mut tape, &bv, a, feats)?;
            let neg = tape.scale(log_s, -1.0);
            let inv_s = tape.exp(neg);
            let shifted = tape.sub(b2, t)?;
            let bb = tape.mul(shifted, inv_s)?;
            x = tape.concat(&[a, bb])?;
            // undo the mixing
            let winv = tape.constant(inverses[b].clone());
            x = tape.conv2d(x, winv, None, 1, 0)?;
            // undo actnorm: x = y / scale - bias = (1/scale) (y - bias * scale)
            let (sv, bvv) = (tape.value(bv.scale).clone(), tape.value(bv.bias).clone());
            let inv_scale = tape.constant(sv.map(|v| 1.0 / v));
            let shift = tape.constant(sv.zip_map(&bvv, |s, b| -b * s)?);
            x = tape.channel_affine(x, inv_scale, shift)?;
        }
        Ok(tape.value(x).clone())
    }

    /// Mean negative log-likelihood `-log q(s | y)` on a tape; returns the
    /// loss variable (without the constant `d/2 log 2π`) and that constant.
    pub fn nll_on(&self, tape: &mut Tape, vars: &[Var], s: Var, y: Var) -> Result<(Var, f64)> {
        let n = self.check_latent(tape.value(s))? as f64;
        let (z, shared, coupling) = self.inverse_on(tape, vars, s, y)?;
        let zz = tape.mul(z, z)?;
        let sq = tape.sum(zz);
        let half_sq = tape.scale(sq, 0.5);
        let cp = tape.sum(coupling);
        let per = tape.sub(half_sq, cp)?;
        let mean = tape.scale(per, 1.0 / n);
        let loss = tape.sub(mean, shared)?;
        Ok((loss, 0.5 * self.cfg.dim() as f64 * libm::log(2.0 * PI)))
    }

    /// Mean NLL of a batch, no gradients.
    pub fn nll(&self, s: &Tensor, y: &Tensor) -> Result<f64> {
        let out = self.inverse(s, y)?;
        let n = out.logdet.len();
        let d = self.cfg.dim() as f64;
        let per = out.z.len() / n.max(1);
        let total: f64 = (0..n)
            .map(|i| {
                let zi = &out.z.data()[i * per..(i + 1) * per];
                0.5 * zi.iter().map(|v| v * v).sum::<f64>() + 0.5 * d * libm::log(2.0 * PI) - out.logdet[i]
            })
            .sum();
        Ok(total / n as f64)
    }

    /// Loss and gradients for one batch; gradients accumulate into the
    /// parameters.
    pub fn accumulate_gradients(&mut self, s: &Tensor, y: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, true);
        let sv = tape.constant(s.clone());
        let yv = tape.constant(y.clone());
        let (loss, constant) = self.nll_on(&mut tape, &vars, sv, yv)?;
        let value = tape.value(loss).item() + constant;
        if !value.is_finite() {
            return Err(TensorError::NonFinite(format!(
                "flow nll {value}; block log-dets {:?}",
                self.block_logdets(s, y).unwrap_or_default()
            )));
        }
        let mut grads = tape.backward(loss)?;
        optim::collect_grads(&mut self.params, &vars, &mut grads)?;
        Ok(value)
    }

    pub fn train_step(&mut self, adam: &Adam, s: &Tensor, y: &Tensor) -> Result<f64> {
        let loss = self.accumulate_gradients(s, y)?;
        adam.step(self.params.iter_mut())?;
        Ok(loss)
    }

    /// Batch-mean log-determinant contributed by each block (diagnostics).
    pub fn block_logdets(&self, s: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = optim::bind(&self.params, &mut tape, false);
        let sv = tape.constant(s.clone());
        let yv = tape.constant(y.clone());
        let feats = self.cond_features_on(&mut tape, &vars, yv)?;
        let mut x = sv;
        let mut out = Vec::with_capacity(self.cfg.blocks);
        for b in 0..self.cfg.blocks {
            let (nx, sh, cp) = self.block_inverse_on(&mut tape, b, &Self::block_vars(&vars, b), x, feats)?;
            x = nx;
            out.push(tape.value(sh).item() + tape.value(cp).mean());
        }
        Ok(out)
    }

    /// Data-dependent actnorm initialization: every block's actnorm maps
    /// the batch to zero mean and unit variance per channel.
    pub fn init_actnorm(&mut self, s: &Tensor, y: &Tensor) -> Result<()> {
        self.check_latent(s)?;
        let [c, h, w] = self.cfg.latent;
        let hw = h * w;
        let mut x = s.clone();
        for b in 0..self.cfg.blocks {
            let n = x.shape()[0];
            let count = (n * hw) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for ch in 0..c {
                    for v in &x.data()[(i * c + ch) * hw..][..hw] {
                        mean[ch] += v;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    for v in &x.data()[(i * c + ch) * hw..][..hw] {
                        var[ch] += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
            }
            {
                let (scale, bias) = self.actnorm_mut(b);
                for ch in 0..c {
                    let std = libm::sqrt(var[ch] / count).max(1e-6);
                    scale.data_mut()[ch] = 1.0 / std;
                    bias.data_mut()[ch] = -mean[ch];
                }
            }
            let mut tape = Tape::new();
            let vars = optim::bind(&self.params, &mut tape, false);
            let yv = tape.constant(y.clone());
            let feats = self.cond_features_on(&mut tape, &vars, yv)?;
            let xv = tape.constant(x);
            let (nx, _, _) = self.block_inverse_on(&mut tape, b, &Self::block_vars(&vars, b), xv, feats)?;
            x = tape.value(nx).clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(c: usize, blocks: usize) -> FlowConfig {
        FlowConfig {
            latent: [c, 1, 1],
            blocks,
            hidden: 8,
            cond_size: 16,
            cond_channels: [4, 4, 4, 4],
        }
    }

    #[test]
    fn identity_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flow = CondFlow::identity(tiny_cfg(4, 3), &mut rng).unwrap();
        let s = Tensor::randn(&[3, 4, 1, 1], &mut rng);
        let y = Tensor::randn(&[3, 1, 16, 16], &mut rng);
        let out = flow.inverse(&s, &y).unwrap();
        assert_eq!(out.z, s);
        assert!(out.logdet.iter().all(|&l| l == 0.0));
        assert_eq!(flow.forward(&s, &y).unwrap(), s);
    }

    #[test]
    fn singular_mixing_names_the_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut flow = CondFlow::identity(tiny_cfg(4, 3), &mut rng).unwrap();
        flow.mixing_mut(1).fill(0.0);
        let s = Tensor::zeros(&[1, 4, 1, 1]);
        let y = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(flow.inverse(&s, &y), Err(TensorError::SingularBlock { block: 1, .. })));
        assert!(matches!(flow.forward(&s, &y), Err(TensorError::SingularBlock { block: 1, .. })));
    }

    #[test]
    fn odd_channel_count_rejected() {
        assert!(tiny_cfg(3, 1).validate().is_err());
    }

    #[test]
    fn condition_size_must_reduce_to_latent() {
        let cfg = FlowConfig {
            cond_size: 40,
            ..FlowConfig::desk()
        };
        assert!(cfg.validate().is_err());
        assert!(FlowConfig::desk().validate().is_ok());
        assert!(FlowConfig::paper().validate().is_ok());
    }

    #[test]
    fn actnorm_data_init_whitens_first_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = FlowConfig {
            latent: [4, 2, 2],
            cond_size: 32,
            ..tiny_cfg(4, 2)
        };
        let mut flow = CondFlow::new(cfg, &mut rng).unwrap();
        let s = Tensor::randn(&[8, 4, 2, 2], &mut rng).map(|v| 3.0 * v + 5.0);
        let y = Tensor::randn(&[8, 1, 32, 32], &mut rng);
        flow.init_actnorm(&s, &y).unwrap();
        let (scale, bias) = flow.actnorm(0);
        let post = s.clone();
        for ch in 0..4 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|i| post.data()[(i * 4 + ch) * 4..][..4].to_vec())
                .map(|v| scale.data()[ch] * (v + bias.data()[ch]))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }
}
