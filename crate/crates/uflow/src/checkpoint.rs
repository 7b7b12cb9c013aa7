//! Checkpoints: `meta.json` (architecture, parameter layout, hashes) next
//! to `params.uft` holding every parameter concatenated as one f64 vector.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uflow_core::flow::{CondFlow, FlowConfig};
use uflow_core::unet::{TargetScaling, UNet, UNetConfig};
use uflow_core::{Parameter, Tensor};

use crate::config::hash_bytes;
use crate::error::{Error, Result};
use crate::uft;

pub const META: &str = "meta.json";
pub const PARAMS: &str = "params.uft";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Unet {
        input_size: usize,
        channels: Vec<usize>,
        coarsest: usize,
        c_background: f64,
        target_mean: f64,
        target_std: f64,
    },
    Flow {
        latent: [usize; 3],
        blocks: usize,
        hidden: usize,
        cond_size: usize,
        cond_channels: [usize; 4],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub architecture: Architecture,
    /// Hash of the configuration stage that produced the checkpoint.
    pub stage_hash: String,
    /// Completed training epochs.
    pub epoch: usize,
    pub params: Vec<ParamEntry>,
    pub num_params: usize,
    /// SHA-256 of `params.uft`.
    pub params_sha256: String,
}

fn save(dir: &Path, architecture: Architecture, stage_hash: &str, epoch: usize, params: &[Parameter]) -> Result<Meta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let flat: Vec<f64> = params.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    let flat = Tensor::new(&[flat.len()], flat)?;
    let mut bytes = Vec::new();
    uft::write_real(&mut bytes, &flat, uft::DType::F64)?;
    let meta = Meta {
        architecture,
        stage_hash: stage_hash.to_string(),
        epoch,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        num_params: flat.len(),
        params_sha256: hash_bytes(&bytes),
    };
    // write to temporaries first so an interrupted save never leaves a torn checkpoint
    let (tmp_params, tmp_meta) = (dir.join("params.uft.tmp"), dir.join("meta.json.tmp"));
    fs::write(&tmp_params, &bytes).map_err(|e| Error::io(&tmp_params, e))?;
    fs::write(&tmp_meta, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&tmp_meta, e))?;
    fs::rename(&tmp_params, dir.join(PARAMS)).map_err(|e| Error::io(dir, e))?;
    fs::rename(&tmp_meta, dir.join(META)).map_err(|e| Error::io(dir, e))?;
    Ok(meta)
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join(META);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Load parameter values into `params`, checking names, shapes and the hash.
fn load_into(dir: &Path, meta: &Meta, params: &mut [Parameter]) -> Result<()> {
    let path = dir.join(PARAMS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hash_bytes(&bytes) != meta.params_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its recorded hash", path.display())));
    }
    let flat = uft::read_real(&mut bytes.as_slice())?;
    if meta.params.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, architecture expects {}",
            meta.params.len(),
            params.len()
        )));
    }
    let mut offset = 0;
    for (p, e) in params.iter_mut().zip(&meta.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} {:?} does not match architecture {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
        let len = p.value.len();
        let chunk = flat
            .data()
            .get(offset..offset + len)
            .ok_or_else(|| Error::Checkpoint("parameter payload too short".into()))?;
        p.value.data_mut().copy_from_slice(chunk);
        offset += len;
    }
    if offset != flat.len() {
        return Err(Error::Checkpoint("parameter payload too long".into()));
    }
    Ok(())
}

pub fn save_unet(dir: &Path, net: &UNet, stage_hash: &str, epoch: usize) -> Result<Meta> {
    let arch = Architecture::Unet {
        input_size: net.cfg.input_size,
        channels: net.cfg.channels.clone(),
        coarsest: net.cfg.coarsest,
        c_background: net.scaling.c_background,
        target_mean: net.scaling.mean,
        target_std: net.scaling.std,
    };
    save(dir, arch, stage_hash, epoch, &net.params)
}

pub fn load_unet(dir: &Path) -> Result<(UNet, Meta)> {
    let meta = read_meta(dir)?;
    let Architecture::Unet {
        input_size,
        ref channels,
        coarsest,
        c_background,
        target_mean,
        target_std,
    } = meta.architecture
    else {
        return Err(Error::Checkpoint(format!("{} is not a U-Net checkpoint", dir.display())));
    };
    let cfg = UNetConfig {
        input_size,
        channels: channels.clone(),
        coarsest,
    };
    let scaling = TargetScaling {
        c_background,
        mean: target_mean,
        std: target_std,
    };
    // values are overwritten below; the generator only shapes the parameters
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = UNet::new(cfg, scaling, &mut rng)?;
    load_into(dir, &meta, &mut net.params)?;
    Ok((net, meta))
}

pub fn save_flow(dir: &Path, flow: &CondFlow, stage_hash: &str, epoch: usize) -> Result<Meta> {
    let c = &flow.cfg;
    let arch = Architecture::Flow {
        latent: c.latent,
        blocks: c.blocks,
        hidden: c.hidden,
        cond_size: c.cond_size,
        cond_channels: c.cond_channels,
    };
    save(dir, arch, stage_hash, epoch, &flow.params)
}

pub fn load_flow(dir: &Path) -> Result<(CondFlow, Meta)> {
    let meta = read_meta(dir)?;
    let Architecture::Flow {
        latent,
        blocks,
        hidden,
        cond_size,
        cond_channels,
    } = meta.architecture
    else {
        return Err(Error::Checkpoint(format!("{} is not a flow checkpoint", dir.display())));
    };
    let cfg = FlowConfig {
        latent,
        blocks,
        hidden,
        cond_size,
        cond_channels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut flow = CondFlow::identity(cfg, &mut rng)?;
    load_into(dir, &meta, &mut flow.params)?;
    Ok((flow, meta))
}

/// Check that a U-Net and a flow checkpoint belong together.
pub fn check_compatible(unet: &UNet, flow: &CondFlow) -> Result<()> {
    if unet.cfg.latent_shape() != flow.cfg.latent || unet.cfg.input_size != flow.cfg.cond_size {
        return Err(Error::Checkpoint(format!(
            "flow latent {:?} / condition {} does not fit U-Net latent {:?} / input {}",
            flow.cfg.latent,
            flow.cfg.cond_size,
            unet.cfg.latent_shape(),
            unet.cfg.input_size
        )));
    }
    Ok(())
}
