//! The whole experiment in one call, with every stage cached on disk and
//! keyed by the hash of the configuration it depends on.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use uflow_core::flow::CondFlow;
use uflow_core::unet::UNet;

use crate::checkpoint;
use crate::config::Config;
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Models};
use crate::train;

pub const REPORT: &str = "report.json";
pub const TIMINGS: &str = "timings.json";

/// Stage directories of a work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn unet(&self) -> PathBuf {
        self.root.join("unet")
    }
    pub fn latents(&self) -> PathBuf {
        self.root.join("latents")
    }
    pub fn flow(&self) -> PathBuf {
        self.root.join("flow")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join(REPORT)
    }
}

pub struct Outputs {
    pub dataset: Dataset,
    pub unet: UNet,
    pub flow: CondFlow,
    pub unet_sha256: String,
    pub flow_sha256: String,
    pub report: EvalReport,
    /// Wall-clock seconds per stage, including stages reused from earlier runs.
    pub timings: BTreeMap<String, f64>,
}

impl Outputs {
    pub fn models(&self) -> Models<'_> {
        Models {
            unet: &self.unet,
            flow: &self.flow,
            unet_sha256: &self.unet_sha256,
            flow_sha256: &self.flow_sha256,
        }
    }
}

fn read_timings(path: &Path) -> BTreeMap<String, f64> {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default()
}

fn write_timings(path: &Path, t: &BTreeMap<String, f64>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(t)?).map_err(|e| Error::io(path, e))
}

fn finished(dir: &Path, hash: &str, epochs: usize) -> Option<checkpoint::Meta> {
    checkpoint::read_meta(dir)
        .ok()
        .filter(|m| m.stage_hash == hash && m.epoch == epochs)
}

fn data_current(cfg: &Config, layout: &Layout) -> bool {
    dataset::read_manifest(&layout.data())
        .map(|m| m.data_hash == cfg.data_hash())
        .unwrap_or(false)
}

/// Whether every training stage for `cfg` is already finished under `root`,
/// so [`run`] would only evaluate.
pub fn is_trained(cfg: &Config, root: &Path) -> bool {
    let layout = Layout::new(root);
    data_current(cfg, &layout)
        && finished(&layout.unet(), &cfg.unet_hash(), cfg.unet.epochs).is_some()
        && finished(&layout.flow(), &cfg.flow_hash(), cfg.flow.epochs).is_some()
}

/// Run (or resume) data generation, U-Net training, latent extraction,
/// flow training and evaluation under `root`.
pub fn run(cfg: &Config, root: &Path) -> Result<Outputs> {
    cfg.validate()?;
    let layout = Layout::new(root);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let timings_path = root.join(TIMINGS);
    let mut timings = read_timings(&timings_path);
    fs::write(root.join("config.json"), serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(root, e))?;

    if !data_current(cfg, &layout) {
        let t = Instant::now();
        log::info!("generating dataset into {}", layout.data().display());
        dataset::generate(cfg, &layout.data())?;
        timings.insert("generate".into(), t.elapsed().as_secs_f64());
        write_timings(&timings_path, &timings)?;
    }
    let ds = dataset::load(&layout.data())?;

    if finished(&layout.unet(), &cfg.unet_hash(), cfg.unet.epochs).is_none() {
        let t = Instant::now();
        train::train_unet(&ds, cfg, &layout.unet())?;
        timings.insert("train_unet".into(), t.elapsed().as_secs_f64());
        write_timings(&timings_path, &timings)?;
    }
    let (unet, unet_meta) = checkpoint::load_unet(&layout.unet())?;

    if finished(&layout.flow(), &cfg.flow_hash(), cfg.flow.epochs).is_none() {
        let t = Instant::now();
        let latents = train::extract_latents(&unet, &ds.train)?;
        train::save_latents(&layout.latents(), &latents, &cfg.unet_hash())?;
        timings.insert("extract_latents".into(), t.elapsed().as_secs_f64());
        let t = Instant::now();
        train::train_flow(&latents, cfg, &layout.flow())?;
        timings.insert("train_flow".into(), t.elapsed().as_secs_f64());
        write_timings(&timings_path, &timings)?;
    }
    let (flow, flow_meta) = checkpoint::load_flow(&layout.flow())?;

    let t = Instant::now();
    let models = Models {
        unet: &unet,
        flow: &flow,
        unet_sha256: &unet_meta.params_sha256,
        flow_sha256: &flow_meta.params_sha256,
    };
    let report = eval::evaluate(&ds, &models, cfg.samples, cfg.seed)?;
    let path = layout.report();
    fs::write(&path, eval::report_json(&report)?).map_err(|e| Error::io(&path, e))?;
    timings.insert("evaluate".into(), t.elapsed().as_secs_f64());
    write_timings(&timings_path, &timings)?;

    Ok(Outputs {
        dataset: ds,
        unet,
        flow,
        unet_sha256: unet_meta.params_sha256,
        flow_sha256: flow_meta.params_sha256,
        report,
        timings,
    })
}
