//! Paired (medium, backprojection) datasets on disk.
//!
//! A dataset directory holds `manifest.json` and `records/NNNNNN.{medium,bp,meas}.uft`
//! with the speed map, the raw backprojection of the noisy measurements and
//! the clean measurement matrix. The noise realization is reproducible from
//! the record seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use uflow_core::records::{mix_seed, network_input, RecordGenerator};
use uflow_core::Tensor;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::uft;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub data_hash: String,
    pub config: Config,
    pub c_background: f64,
    pub records: Vec<RecordEntry>,
}

/// One record as used by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    pub entry: RecordEntry,
    /// Speed map `[n, n]` in m/s.
    pub speed: Tensor,
    /// Raw backprojection `[n, n]`.
    pub bp: Tensor,
}

impl StoredRecord {
    /// Standardized network input `[1, 1, n, n]`.
    pub fn input(&self) -> Tensor {
        let n = self.bp.shape()[0];
        network_input(&self.bp).reshape(&[1, 1, n, n]).expect("square image")
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<StoredRecord>,
    pub test: Vec<StoredRecord>,
}

pub fn record_path(dir: &Path, index: usize, kind: &str) -> PathBuf {
    dir.join("records").join(format!("{index:06}.{kind}.uft"))
}

/// Read the manifest of `dir` if there is one.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Generate `n_train + n_test` records into `dir`. Record `i` uses the
/// seed `mix_seed(cfg.seed, i)`; the first `n_train` form the training split.
pub fn generate(cfg: &Config, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let rc = cfg.record_config()?;
    let c_background = rc.scene.c_background;
    let started = Instant::now();
    let gen = RecordGenerator::new(rc)?;
    log::info!("backprojector ready in {:.1}s", started.elapsed().as_secs_f64());
    let records_dir = dir.join("records");
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;
    let total = cfg.data.n_train + cfg.data.n_test;
    let mut entries = Vec::with_capacity(total);
    for index in 0..total {
        let seed = mix_seed(cfg.seed, index as u64);
        let rec = gen.generate(seed)?;
        uft::save_real(&record_path(dir, index, "medium"), &rec.medium.c)?;
        uft::save_real(&record_path(dir, index, "bp"), &rec.bp)?;
        uft::save_complex(
            &record_path(dir, index, "meas"),
            &[rec.clean.n_src, rec.clean.n_rec],
            &rec.clean.values,
        )?;
        let split = if index < cfg.data.n_train { Split::Train } else { Split::Test };
        entries.push(RecordEntry { index, seed, split });
        if (index + 1) % 50 == 0 || index + 1 == total {
            log::info!(
                "generated {}/{} records ({:.1}s)",
                index + 1,
                total,
                started.elapsed().as_secs_f64()
            );
        }
    }
    let manifest = Manifest {
        data_hash: cfg.data_hash(),
        config: cfg.clone(),
        c_background,
        records: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load every record listed in the manifest of `dir`.
pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let n = manifest.config.data.grid;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for entry in &manifest.records {
        let speed = uft::load_real(&record_path(dir, entry.index, "medium"))?;
        let bp = uft::load_real(&record_path(dir, entry.index, "bp"))?;
        for (name, t) in [("medium", &speed), ("bp", &bp)] {
            if t.shape() != [n, n] {
                return Err(Error::Dataset(format!(
                    "record {} {name} has shape {:?}, expected [{n}, {n}]",
                    entry.index,
                    t.shape()
                )));
            }
        }
        let rec = StoredRecord {
            entry: entry.clone(),
            speed,
            bp,
        };
        match entry.split {
            Split::Train => train.push(rec),
            Split::Test => test.push(rec),
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("both splits must be non-empty".into()));
    }
    Ok(Dataset { manifest, train, test })
}

/// Stack records into `[N, 1, n, n]` network inputs and speed maps.
pub fn batch(records: &[&StoredRecord]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<Tensor> = records.iter().map(|r| r.input()).collect();
    let n = records[0].speed.shape()[0];
    let speeds = records
        .iter()
        .map(|r| r.speed.clone().reshape(&[1, 1, n, n]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((Tensor::concat_batch(&inputs)?, Tensor::concat_batch(&speeds)?))
}
