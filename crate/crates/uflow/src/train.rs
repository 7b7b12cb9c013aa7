//! Training loops for the U-Net and the conditional flow, and latent
//! extraction between the two.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uflow_core::flow::CondFlow;
use uflow_core::records::mix_seed;
use uflow_core::unet::{TargetScaling, UNet};
use uflow_core::{Adam, Tensor};

use crate::checkpoint;
use crate::config::Config;
use crate::dataset::{Dataset, StoredRecord};
use crate::error::{Error, Result};
use crate::uft;

/// Stream tags separating the random streams of the stages.
const UNET_STREAM: u64 = 0x554e_4554;
const FLOW_STREAM: u64 = 0x464c_4f57;

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub seconds: f64,
}

/// `(inputs, targets)` stacks of shape `[N, 1, n, n]`.
struct Pairs {
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
}

impl Pairs {
    fn new(records: &[StoredRecord], scaling: &TargetScaling) -> Result<Self> {
        let mut inputs = Vec::with_capacity(records.len());
        let mut targets = Vec::with_capacity(records.len());
        for r in records {
            let n = r.speed.shape()[0];
            inputs.push(r.input());
            targets.push(scaling.to_target(&r.speed).reshape(&[1, 1, n, n])?);
        }
        Ok(Self { inputs, targets })
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let x: Vec<Tensor> = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let t: Vec<Tensor> = idx.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((Tensor::concat_batch(&x)?, Tensor::concat_batch(&t)?))
    }
}

/// Shuffled mini-batch index lists for one epoch.
fn epoch_batches(n: usize, batch_size: usize, stream: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(stream, epoch as u64)));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn open_log(dir: &Path) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    Ok(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
}

fn write_log(w: &mut BufWriter<File>, entry: &EpochLog) -> Result<()> {
    serde_json::to_writer(&mut *w, entry)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Train the U-Net on the training split with MSE on the standardized
/// contrast; checkpoints after every epoch into `out`.
pub fn train_unet(ds: &Dataset, cfg: &Config, out: &Path) -> Result<UNet> {
    let c_bg = ds.manifest.c_background;
    let scaling = TargetScaling::fit(ds.train.iter().map(|r| &r.speed), c_bg);
    let stream = mix_seed(cfg.seed, UNET_STREAM);
    let mut net = UNet::new(cfg.unet_config(), scaling, &mut ChaCha8Rng::seed_from_u64(stream))?;
    log::info!("U-Net with {} parameters; target scaling {scaling:?}", net.num_params());
    let train = Pairs::new(&ds.train, &scaling)?;
    let test = Pairs::new(&ds.test, &scaling)?;
    let adam = Adam::with_lr(cfg.unet.lr);
    let mut log_w = open_log(out)?;
    let hash = cfg.unet_hash();
    for epoch in 0..cfg.unet.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        let batches = epoch_batches(train.inputs.len(), cfg.unet.batch_size, stream, epoch);
        for idx in &batches {
            let (x, t) = train.batch(idx)?;
            total += net.train_step(&adam, &x, &t)? * idx.len() as f64;
        }
        let train_loss = total / train.inputs.len() as f64;
        let test_loss = unet_loss(&net, &test, cfg.unet.batch_size)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss,
            test_loss: Some(test_loss),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "unet epoch {}/{}: train {:.5} test {:.5} ({:.1}s)",
            entry.epoch,
            cfg.unet.epochs,
            train_loss,
            test_loss,
            entry.seconds
        );
        write_log(&mut log_w, &entry)?;
        checkpoint::save_unet(out, &net, &hash, epoch + 1)?;
    }
    Ok(net)
}

fn unet_loss(net: &UNet, pairs: &Pairs, batch_size: usize) -> Result<f64> {
    let n = pairs.inputs.len();
    let mut total = 0.0;
    for start in (0..n).step_by(batch_size) {
        let idx: Vec<usize> = (start..(start + batch_size).min(n)).collect();
        let (x, t) = pairs.batch(&idx)?;
        total += net.loss(&x, &t)? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Coarsest latents of a frozen U-Net paired with the network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    /// `[N, C, h, w]`.
    pub s6: Tensor,
    /// Standardized backprojections `[N, 1, n, n]`.
    pub cond: Tensor,
}

pub const LATENT_FILE: &str = "s6.uft";
pub const COND_FILE: &str = "cond.uft";

/// Encode every record; the stored latent is exactly `encode(input)`'s
/// coarsest level.
pub fn extract_latents(net: &UNet, records: &[StoredRecord]) -> Result<Latents> {
    if records.is_empty() {
        return Err(Error::Dataset("no records to encode".into()));
    }
    let mut s6 = Vec::with_capacity(records.len());
    let mut cond = Vec::with_capacity(records.len());
    for chunk in records.chunks(32) {
        let inputs: Vec<Tensor> = chunk.iter().map(StoredRecord::input).collect();
        let x = Tensor::concat_batch(&inputs)?;
        s6.push(net.encode(&x)?.coarsest().clone());
        cond.push(x);
    }
    Ok(Latents {
        s6: Tensor::concat_batch(&s6)?,
        cond: Tensor::concat_batch(&cond)?,
    })
}

pub fn save_latents(dir: &Path, latents: &Latents, unet_hash: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    uft::save_real(&dir.join(LATENT_FILE), &latents.s6)?;
    uft::save_real(&dir.join(COND_FILE), &latents.cond)?;
    let path = dir.join("latents.json");
    let meta = serde_json::json!({ "unet_hash": unet_hash, "count": latents.s6.shape()[0] });
    fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

pub fn load_latents(dir: &Path) -> Result<Latents> {
    let s6 = uft::load_real(&dir.join(LATENT_FILE))?;
    let cond = uft::load_real(&dir.join(COND_FILE))?;
    if s6.rank() != 4 || cond.rank() != 4 || s6.shape()[0] != cond.shape()[0] {
        return Err(Error::Dataset(format!(
            "latent {:?} and condition {:?} stacks do not pair up",
            s6.shape(),
            cond.shape()
        )));
    }
    Ok(Latents { s6, cond })
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx.iter().map(|&i| t.batch_item(i)).collect();
    Ok(Tensor::concat_batch(&items)?)
}

/// Train the conditional flow by maximum likelihood on `(s6, y)` pairs.
/// Actnorm is initialized from the first batch; checkpoints every epoch.
pub fn train_flow(latents: &Latents, cfg: &Config, out: &Path) -> Result<CondFlow> {
    let stream = mix_seed(cfg.seed, FLOW_STREAM);
    let mut flow = CondFlow::new(cfg.flow_config(), &mut ChaCha8Rng::seed_from_u64(stream))?;
    log::info!("flow with {} parameters", flow.num_params());
    let n = latents.s6.shape()[0];
    let dim = flow.cfg.dim() as f64;
    let adam = Adam::with_lr(cfg.flow.lr);
    let mut log_w = open_log(out)?;
    let hash = cfg.flow_hash();
    for epoch in 0..cfg.flow.epochs {
        let started = Instant::now();
        let batches = epoch_batches(n, cfg.flow.batch_size, stream, epoch);
        if epoch == 0 {
            let first = &batches[0];
            flow.init_actnorm(&gather(&latents.s6, first)?, &gather(&latents.cond, first)?)?;
        }
        let mut total = 0.0;
        for idx in &batches {
            let s = gather(&latents.s6, idx)?;
            let y = gather(&latents.cond, idx)?;
            total += flow.train_step(&adam, &s, &y)? * idx.len() as f64;
        }
        let train_loss = total / n as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss,
            test_loss: None,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "flow epoch {}/{}: nll {:.3} ({:.4} nats/dim, {:.1}s)",
            entry.epoch,
            cfg.flow.epochs,
            train_loss,
            train_loss / dim,
            entry.seconds
        );
        write_log(&mut log_w, &entry)?;
        checkpoint::save_flow(out, &flow, &hash, epoch + 1)?;
    }
    Ok(flow)
}

/// Parse a training log written by the loops above.
pub fn read_log(dir: &Path) -> Result<Vec<EpochLog>> {
    let path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
