//! Random ellipse phantoms and source/receiver ring geometries.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::tensor::Tensor;
use crate::wave::{Grid2D, Medium, WaveError, C_BACKGROUND, OMEGA};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Sensors equally spaced on the whole circle.
    Full,
    /// Sensors on the right half-circle `[-π/2, π/2]` only.
    Limited,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Full => "full",
            View::Limited => "limited",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(View::Full),
            "limited" | "side" => Some(View::Limited),
            _ => None,
        }
    }
}

/// Collocated source/receiver ring centred on the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGeometry {
    pub ring_radius: f64,
    pub n_sensors: usize,
    pub view: View,
    /// Angular interval covered by the sensors, radians.
    pub arc: (f64, f64),
}

impl SensorGeometry {
    pub fn new(ring_radius: f64, n_sensors: usize, view: View, grid: &Grid2D) -> Result<Self, WaveError> {
        if n_sensors < 4 {
            return Err(WaveError::InvalidConfig("at least 4 sensors are required"));
        }
        // the outermost sensor cell must stay inside the physical domain
        if !(ring_radius > 0.0) || ring_radius + grid.dx > grid.half_width() {
            return Err(WaveError::InvalidConfig("sensor ring does not fit inside the PML-free region"));
        }
        let arc = match view {
            View::Full => (0.0, 2.0 * PI),
            View::Limited => (-0.5 * PI, 0.5 * PI),
        };
        Ok(Self {
            ring_radius,
            n_sensors,
            view,
            arc,
        })
    }

    /// Sensor angles: `2πk/n` on the full ring, arc midpoints for limited view.
    pub fn angles(&self) -> Vec<f64> {
        let n = self.n_sensors as f64;
        (0..self.n_sensors)
            .map(|k| match self.view {
                View::Full => 2.0 * PI * k as f64 / n,
                View::Limited => self.arc.0 + (self.arc.1 - self.arc.0) * (k as f64 + 0.5) / n,
            })
            .collect()
    }

    /// Physical `(x, y)` sensor positions, metres.
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.angles()
            .into_iter()
            .map(|t| (self.ring_radius * libm::cos(t), self.ring_radius * libm::sin(t)))
            .collect()
    }
}

/// Ring at 0.9 of the domain half-width.
pub fn build_geometry(view: View, n_sensors: usize, grid: &Grid2D) -> Result<SensorGeometry, WaveError> {
    SensorGeometry::new(0.9 * grid.half_width(), n_sensors, view, grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseSpec {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    /// Speed inside relative to the background, in `(1, 4]`.
    pub speed_contrast: f64,
}

impl EllipseSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = (libm::sin(self.rotation), libm::cos(self.rotation));
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = self.semi_axes;
        (u / a) * (u / a) + (v / b) * (v / b) <= 1.0
    }

    /// Whether the ellipse lies inside the disk of radius `r` at the origin.
    pub fn inside_disk(&self, r: f64) -> bool {
        let (cx, cy) = self.center;
        libm::hypot(cx, cy) + self.semi_axes.0.max(self.semi_axes.1) <= r
    }
}

/// Distributions of the random phantoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    /// Inclusive range for the number of ellipses.
    pub count_range: (usize, usize),
    /// Full axis lengths in wavelengths, uniform.
    pub axis_range_wavelengths: (f64, f64),
    /// Speed contrast is uniform in `(min, max]`.
    pub contrast_range: (f64, f64),
    /// Scatterers stay inside this fraction of the sensor ring radius.
    pub confinement: f64,
    pub c_background: f64,
    pub omega: f64,
    pub max_tries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            count_range: (1, 5),
            axis_range_wavelengths: (0.75, 3.0),
            contrast_range: (1.0, 4.0),
            confinement: 0.7,
            c_background: C_BACKGROUND,
            omega: OMEGA,
            max_tries: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), WaveError> {
        let (lo, hi) = self.contrast_range;
        if !(lo >= 1.0 && hi > lo && hi <= 4.0) {
            return Err(WaveError::InvalidConfig("contrast range must satisfy 1 <= lo < hi <= 4"));
        }
        if self.count_range.0 > self.count_range.1 {
            return Err(WaveError::InvalidConfig("empty ellipse count range"));
        }
        let (a0, a1) = self.axis_range_wavelengths;
        if !(a0 > 0.0 && a1 >= a0) {
            return Err(WaveError::InvalidConfig("invalid axis range"));
        }
        Ok(())
    }
}

/// Draw one ellipse that fits inside the disk of radius `disk`.
pub fn sample_ellipse<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    disk: f64,
    rng: &mut R,
) -> Result<EllipseSpec, WaveError> {
    let lambda = 2.0 * PI * cfg.c_background / cfg.omega;
    let (a0, a1) = cfg.axis_range_wavelengths;
    for _ in 0..cfg.max_tries {
        let a = 0.5 * lambda * rng.random_range(a0..=a1);
        let b = 0.5 * lambda * rng.random_range(a0..=a1);
        let r = disk * libm::sqrt(rng.random::<f64>());
        let phi = rng.random_range(0.0..2.0 * PI);
        let rotation = rng.random_range(0.0..PI);
        let (lo, hi) = cfg.contrast_range;
        // uniform on (lo, hi]
        let contrast = hi - (hi - lo) * rng.random::<f64>();
        let e = EllipseSpec {
            center: (r * libm::cos(phi), r * libm::sin(phi)),
            semi_axes: (a, b),
            rotation,
            speed_contrast: contrast,
        };
        if e.inside_disk(disk) {
            return Ok(e);
        }
    }
    Err(WaveError::InvalidConfig("could not place an ellipse inside the confinement disk"))
}

/// Rasterize ellipses onto the grid: overlaps take the larger speed, then
/// one 3x3 box-average pass softens the edges.
pub fn rasterize(ellipses: &[EllipseSpec], grid: &Grid2D, c_background: f64) -> Medium {
    let n = grid.n;
    let mut c = Tensor::full(&[n, n], c_background);
    for iy in 0..n {
        for ix in 0..n {
            let (x, y) = (grid.coord(ix), grid.coord(iy));
            for e in ellipses {
                if e.contains(x, y) {
                    let v = &mut c.data_mut()[iy * n + ix];
                    *v = v.max(e.speed_contrast * c_background);
                }
            }
        }
    }
    Medium {
        c: box_smooth(&c),
        c_background,
    }
}

fn box_smooth(c: &Tensor) -> Tensor {
    let n = c.shape()[0];
    let d = c.data();
    Tensor::from_fn(&[n, n], |idx| {
        let (iy, ix) = (idx / n, idx % n);
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for yy in iy.saturating_sub(1)..=(iy + 1).min(n - 1) {
            for xx in ix.saturating_sub(1)..=(ix + 1).min(n - 1) {
                acc += d[yy * n + xx];
                cnt += 1.0;
            }
        }
        acc / cnt
    })
}

/// Random ellipse phantom.
pub fn sample_medium<R: Rng + ?Sized>(
    cfg: &SceneConfig,
    grid: &Grid2D,
    geometry: &SensorGeometry,
    rng: &mut R,
) -> Result<(Medium, Vec<EllipseSpec>), WaveError> {
    cfg.validate()?;
    let (lo, hi) = cfg.count_range;
    let count = rng.random_range(lo..=hi);
    let disk = cfg.confinement * geometry.ring_radius;
    let ellipses = (0..count)
        .map(|_| sample_ellipse(cfg, disk, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((rasterize(&ellipses, grid, cfg.c_background), ellipses))
}
