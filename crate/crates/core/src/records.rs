//! Paired training records: sample a medium, simulate, add noise and
//! backproject at the homogeneous background.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{standardize, Backprojector};
use crate::scene::{build_geometry, sample_medium, SceneConfig, SensorGeometry, View};
use crate::tensor::Tensor;
use crate::wave::{
    add_noise, simulate_measurements, Grid2D, MeasurementMatrix, Medium, SolverConfig, WaveError, DEFAULT_SNR_DB,
    OMEGA,
};

/// Everything that determines a dataset besides the master seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordConfig {
    pub grid: Grid2D,
    pub view: View,
    pub n_sensors: usize,
    pub omega: f64,
    pub snr_db: f64,
    pub scene: SceneConfig,
    pub solver: SolverConfig,
}

impl RecordConfig {
    /// 64 x 64 grid, 16 sensors, 30 dB.
    pub fn desk(view: View) -> Self {
        Self {
            grid: Grid2D::desk(),
            view,
            n_sensors: 16,
            omega: OMEGA,
            snr_db: DEFAULT_SNR_DB,
            scene: SceneConfig::default(),
            solver: SolverConfig::default(),
        }
    }

    /// 128 x 128 grid, 32 sensors, 30 dB.
    pub fn paper(view: View) -> Self {
        Self {
            grid: Grid2D::paper(),
            n_sensors: 32,
            ..Self::desk(view)
        }
    }
}

/// One generated sample. `bp` is the raw backprojection; networks consume
/// `standardize(bp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub medium: Medium,
    pub clean: MeasurementMatrix,
    pub bp: Tensor,
}

/// SplitMix64 finalizer, used to derive independent per-record streams.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the noise stream belonging to record seed `seed`.
pub fn noise_seed(seed: u64) -> u64 {
    mix_seed(seed, u64::MAX)
}

/// Holds the background backprojector so it is built once per geometry.
pub struct RecordGenerator {
    cfg: RecordConfig,
    geometry: SensorGeometry,
    backprojector: Backprojector,
}

impl RecordGenerator {
    pub fn new(cfg: RecordConfig) -> Result<Self, WaveError> {
        cfg.scene.validate()?;
        let geometry = build_geometry(cfg.view, cfg.n_sensors, &cfg.grid)?;
        let backprojector =
            Backprojector::background(&cfg.grid, &geometry, cfg.omega, cfg.scene.c_background, &cfg.solver)?;
        Ok(Self {
            cfg,
            geometry,
            backprojector,
        })
    }

    pub fn config(&self) -> &RecordConfig {
        &self.cfg
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn backprojector(&self) -> &Backprojector {
        &self.backprojector
    }

    /// Sample, simulate, corrupt and backproject. The medium comes from the
    /// stream `seed`, the noise from `noise_seed(seed)`.
    pub fn generate(&self, seed: u64) -> Result<Record, WaveError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (medium, _) = sample_medium(&self.cfg.scene, &self.cfg.grid, &self.geometry, &mut rng)?;
        let clean = simulate_measurements(&medium, &self.cfg.grid, &self.geometry, self.cfg.omega, &self.cfg.solver)?;
        let bp = self.backproject_clean(&clean, seed)?;
        Ok(Record {
            seed,
            medium,
            clean,
            bp,
        })
    }

    /// Recompute a record's raw backprojection from its clean measurements.
    pub fn backproject_clean(&self, clean: &MeasurementMatrix, seed: u64) -> Result<Tensor, WaveError> {
        let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed(seed));
        let noisy = add_noise(clean, self.cfg.snr_db, &mut noise_rng);
        self.backprojector.backproject(&noisy)
    }
}

/// Network input for a raw backprojection.
pub fn network_input(bp: &Tensor) -> Tensor {
    standardize(bp).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a: alloc::vec::Vec<u64> = (0..100).map(|i| mix_seed(7, i)).collect();
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_ne!(mix_seed(7, 0), mix_seed(8, 0));
        assert_ne!(noise_seed(5), 5);
    }

    #[test]
    fn record_is_reproducible() {
        let cfg = RecordConfig {
            grid: Grid2D::with_default_pml(32, crate::wave::DX).unwrap(),
            n_sensors: 8,
            ..RecordConfig::desk(View::Full)
        };
        let cfg = RecordConfig {
            scene: SceneConfig {
                axis_range_wavelengths: (0.5, 1.0),
                ..cfg.scene
            },
            ..cfg
        };
        let gen = RecordGenerator::new(cfg).unwrap();
        let a = gen.generate(11).unwrap();
        let b = gen.generate(11).unwrap();
        assert_eq!(a, b);
        assert_eq!(gen.backproject_clean(&a.clean, a.seed).unwrap(), a.bp);
        assert_ne!(gen.generate(12).unwrap().medium, a.medium);
    }
}
