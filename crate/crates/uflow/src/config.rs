//! Experiment configuration (JSON) and content hashes of its stages.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uflow_core::flow::FlowConfig;
use uflow_core::records::RecordConfig;
use uflow_core::scene::{SceneConfig, View};
use uflow_core::unet::UNetConfig;
use uflow_core::wave::{Grid2D, DX};

use crate::error::{Error, Result};

/// Sensor arrangement, serialized as `"full"` / `"limited"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Full,
    Limited,
}

impl From<ViewKind> for View {
    fn from(v: ViewKind) -> Self {
        match v {
            ViewKind::Full => View::Full,
            ViewKind::Limited => View::Limited,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub view: ViewKind,
    pub grid: usize,
    pub sensors: usize,
    pub snr_db: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub ellipses: (usize, usize),
    pub axis_wavelengths: (f64, f64),
    pub contrast: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub blocks: usize,
    pub hidden: usize,
}

/// Everything one experiment depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub unet: TrainConfig,
    pub flow: FlowTrainConfig,
    /// Posterior draws per measurement.
    pub samples: usize,
}

impl Config {
    /// 64 x 64 grid, 16 sensors, 1000 training media, 300 + 300 epochs.
    pub fn desk(view: ViewKind) -> Self {
        let scene = SceneConfig::default();
        Self {
            seed: 2024,
            data: DataConfig {
                view,
                grid: 64,
                sensors: 16,
                snr_db: 30.0,
                n_train: 1000,
                n_test: 100,
                ellipses: scene.count_range,
                axis_wavelengths: scene.axis_range_wavelengths,
                contrast: scene.contrast_range,
            },
            unet: TrainConfig {
                epochs: 300,
                batch_size: 16,
                lr: 1e-4,
            },
            flow: FlowTrainConfig {
                epochs: 300,
                batch_size: 32,
                lr: 1e-4,
                blocks: 24,
                hidden: FlowConfig::desk().hidden,
            },
            samples: 25,
        }
    }

    /// 128 x 128 grid and 32 sensors; everything else as [`Config::desk`].
    pub fn paper(view: ViewKind) -> Self {
        let mut cfg = Self::desk(view);
        cfg.data.grid = 128;
        cfg.data.sensors = 32;
        cfg
    }

    /// A few-minute configuration for exercising the whole pipeline.
    pub fn smoke(view: ViewKind) -> Self {
        let mut cfg = Self::desk(view);
        cfg.data.n_train = 24;
        cfg.data.n_test = 4;
        cfg.unet.epochs = 2;
        cfg.unet.batch_size = 8;
        cfg.flow.epochs = 2;
        cfg.flow.batch_size = 8;
        cfg.flow.blocks = 2;
        cfg.flow.hidden = 16;
        cfg.samples = 4;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.record_config()?;
        self.unet_config().validate()?;
        self.flow_config().validate()?;
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("train and test splits must be non-empty".into()));
        }
        if self.unet.batch_size == 0 || self.flow.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.samples < 2 {
            return Err(Error::Config("at least 2 posterior samples are needed".into()));
        }
        Ok(())
    }

    pub fn record_config(&self) -> Result<RecordConfig> {
        let grid = Grid2D::with_default_pml(self.data.grid, DX)?;
        let mut rc = RecordConfig::desk(self.data.view.into());
        rc.grid = grid;
        rc.n_sensors = self.data.sensors;
        rc.snr_db = self.data.snr_db;
        rc.scene.count_range = self.data.ellipses;
        rc.scene.axis_range_wavelengths = self.data.axis_wavelengths;
        rc.scene.contrast_range = self.data.contrast;
        rc.scene.validate()?;
        Ok(rc)
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig::standard(self.data.grid)
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            latent: self.unet_config().latent_shape(),
            blocks: self.flow.blocks,
            hidden: self.flow.hidden,
            ..FlowConfig::standard(self.data.grid)
        }
    }

    /// Hash of everything the dataset depends on.
    pub fn data_hash(&self) -> String {
        hash_json(&(self.seed, &self.data))
    }

    /// Hash of everything the trained U-Net depends on.
    pub fn unet_hash(&self) -> String {
        hash_json(&(self.data_hash(), &self.unet))
    }

    /// Hash of everything the trained flow depends on.
    pub fn flow_hash(&self) -> String {
        hash_json(&(self.unet_hash(), &self.flow))
    }

    /// Hash of the complete configuration.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configuration serializes");
    hex(&Sha256::digest(bytes))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
