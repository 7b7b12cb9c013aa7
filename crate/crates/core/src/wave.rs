//! Frequency-domain Helmholtz solver on a square grid with a PML collar.
//!
//! The continuous equation is `(Δ + ω²/c²) u = -i g` on the `n x n` physical
//! grid, surrounded by `pml_thickness` absorbing cells on every side and a
//! homogeneous Dirichlet condition beyond. Inside the collar the Laplacian
//! uses complex coordinate stretching `s(ξ) = 1 + iσ(ξ)/ω` with a quadratic
//! `σ` profile, written in the symmetric form
//! `∂x(sy/sx ∂x u) + ∂y(sx/sy ∂y u) + sx sy ω²/c² u`, so the assembled
//! matrix is complex symmetric and the measurement matrix is reciprocal.
//! See [`HelmholtzOperator`] for the discretization.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::banded::BandedLu;
use crate::krylov::{self, GmresConfig, GmresStats, LinearOperator, Preconditioner};
use crate::scene::SensorGeometry;
use crate::tensor::Tensor;

/// Background wave speed of soft tissue, m/s.
pub const C_BACKGROUND: f64 = 1540.0;
/// Angular frequency used throughout, 1/s.
pub const OMEGA: f64 = 7.0e5;
/// Grid spacing, m.
pub const DX: f64 = 1.0e-3;
/// Measurement noise level.
pub const DEFAULT_SNR_DB: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WaveError {
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("invalid medium: {0}")]
    InvalidMedium(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("{what}: expected length {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("solver did not converge: relative residual {relative_residual:e} after {iterations} iterations")]
    NotConverged {
        relative_residual: f64,
        iterations: usize,
    },
    #[error("zero pivot in banded factorization at row {row}")]
    Factorization { row: usize },
    #[error("source {index}: {source}")]
    Source {
        index: usize,
        #[source]
        source: Box<WaveError>,
    },
    #[error("sensor at ({x:.4}, {y:.4}) m lies outside the physical domain")]
    SensorOutside { x: f64, y: f64 },
}

/// Square computational grid: `n x n` physical cells plus the PML collar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid2D {
    pub n: usize,
    pub dx: f64,
    pub pml_thickness: usize,
    /// Peak PML damping `σ_max`, 1/s.
    pub pml_strength: f64,
}

impl Grid2D {
    pub fn new(n: usize, dx: f64, pml_thickness: usize, pml_strength: f64) -> Result<Self, WaveError> {
        if n < 16 {
            return Err(WaveError::InvalidGrid("n must be at least 16"));
        }
        if !(dx > 0.0) {
            return Err(WaveError::InvalidGrid("dx must be positive"));
        }
        if pml_thickness < 8 {
            return Err(WaveError::InvalidGrid("pml_thickness must be at least 8"));
        }
        if !(pml_strength >= 0.0) {
            return Err(WaveError::InvalidGrid("pml_strength must be non-negative"));
        }
        Ok(Self {
            n,
            dx,
            pml_thickness,
            pml_strength,
        })
    }

    /// Grid with a PML tuned for a target normal-incidence reflection
    /// `exp(-2/3 σ_max L / c)` of about 1e-6.
    pub fn with_default_pml(n: usize, dx: f64) -> Result<Self, WaveError> {
        let thickness = 16;
        let strength = Self::pml_strength_for(thickness, dx, C_BACKGROUND, 1e-6);
        Self::new(n, dx, thickness, strength)
    }

    pub fn pml_strength_for(thickness: usize, dx: f64, c: f64, reflection: f64) -> f64 {
        3.0 * c * libm::log(1.0 / reflection) / (2.0 * thickness as f64 * dx)
    }

    /// 64 x 64 at 1 mm.
    pub fn desk() -> Self {
        Self::with_default_pml(64, DX).expect("valid desk grid")
    }

    /// 128 x 128 at 1 mm.
    pub fn paper() -> Self {
        Self::with_default_pml(128, DX).expect("valid paper grid")
    }

    /// Cells per side including the collar.
    pub fn total(&self) -> usize {
        self.n + 2 * self.pml_thickness
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.n as f64 * self.dx
    }

    /// Physical coordinate of interior cell index `i` (domain centred at 0).
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 + 0.5 - 0.5 * self.n as f64) * self.dx
    }

    /// Interior index nearest to physical coordinate `x`.
    pub fn nearest_index(&self, x: f64) -> Option<usize> {
        let f = libm::round(x / self.dx + 0.5 * self.n as f64 - 0.5);
        (f >= 0.0 && f < self.n as f64).then_some(f as usize)
    }

    /// Flattened index in the full grid of interior cell `(ix, iy)`.
    pub fn full_index(&self, ix: usize, iy: usize) -> usize {
        let p = self.pml_thickness;
        (iy + p) * self.total() + ix + p
    }

    /// Damping at position `xi` measured in cell units from the outer edge.
    fn sigma(&self, xi: f64) -> f64 {
        let p = self.pml_thickness as f64;
        let inner_hi = p + self.n as f64;
        let depth = if xi < p {
            p - xi
        } else if xi > inner_hi {
            xi - inner_hi
        } else {
            0.0
        };
        let r = depth / p;
        self.pml_strength * r * r
    }

    fn stretch(&self, xi: f64, omega: f64) -> C64 {
        C64::new(1.0, self.sigma(xi) / omega)
    }

    pub fn wavelength(&self, omega: f64, c: f64) -> f64 {
        2.0 * core::f64::consts::PI * c / omega
    }
}

/// Wave-speed field over the physical grid (row index `iy`, column `ix`).
#[derive(Debug, Clone, PartialEq)]
pub struct Medium {
    pub c: Tensor,
    pub c_background: f64,
}

impl Medium {
    pub fn new(c: Tensor, c_background: f64) -> Result<Self, WaveError> {
        let m = Self { c, c_background };
        m.validate()?;
        Ok(m)
    }

    pub fn homogeneous(n: usize, c: f64) -> Self {
        Self {
            c: Tensor::full(&[n, n], c),
            c_background: c,
        }
    }

    pub fn n(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn validate(&self) -> Result<(), WaveError> {
        match self.c.shape() {
            [a, b] if a == b => {}
            _ => return Err(WaveError::InvalidMedium("wave speed must be a square 2D field")),
        }
        if !(self.c_background > 0.0) {
            return Err(WaveError::InvalidMedium("background speed must be positive"));
        }
        if !self.c.data().iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(WaveError::InvalidMedium("wave speed must be positive and finite"));
        }
        Ok(())
    }

    /// Speed minus background.
    pub fn contrast(&self) -> Tensor {
        self.c.map(|v| v - self.c_background)
    }
}

/// Complex field over the full grid including the PML collar.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub m: usize,
    pub data: Vec<C64>,
}

impl ComplexField {
    pub fn zeros(m: usize) -> Self {
        Self {
            m,
            data: vec![C64::new(0.0, 0.0); m * m],
        }
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|z| z.norm_sqr()).sum())
    }
}

/// Point source on an interior cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceTerm {
    pub ix: usize,
    pub iy: usize,
    pub omega: f64,
    pub amplitude: C64,
}

impl SourceTerm {
    pub fn unit(ix: usize, iy: usize, omega: f64) -> Self {
        Self {
            ix,
            iy,
            omega,
            amplitude: C64::new(1.0, 0.0),
        }
    }

    /// Right-hand side `-i B g` with `g` a discrete delta of mass
    /// `amplitude`, spread by the compact mass distribution `B`.
    pub fn rhs(&self, grid: &Grid2D) -> Result<Vec<C64>, WaveError> {
        if self.ix >= grid.n || self.iy >= grid.n {
            return Err(WaveError::InvalidConfig("source outside the physical domain"));
        }
        if !(self.omega > 0.0) {
            return Err(WaveError::InvalidConfig("omega must be positive"));
        }
        let m = grid.total();
        let idx = grid.full_index(self.ix, self.iy);
        let mut b = vec![C64::new(0.0, 0.0); m * m];
        let g = C64::new(0.0, -1.0) * self.amplitude / (grid.dx * grid.dx);
        b[idx] = g * MASS_CENTER;
        for nb in [idx - 1, idx + 1, idx - m, idx + m] {
            b[nb] = g * MASS_AXIAL;
        }
        Ok(b)
    }
}

/// Centre weight of the compact mass distribution.
pub const MASS_CENTER: f64 = 2.0 / 3.0;
/// Weight of each axial neighbour in the compact mass distribution.
pub const MASS_AXIAL: f64 = 1.0 / 12.0;
/// Share of the rotated (diagonal) stencil in the physical region.
const ROTATED_SHARE: f64 = 1.0 / 3.0;
/// PML cells over which the rotated share fades to zero.
const ROTATED_RAMP: f64 = 4.0;

/// Matrix-free discrete Helmholtz operator for one medium and frequency.
///
/// In the physical region this is the compact fourth-order scheme
/// `L u + ½(B K + K B) u` where `L = ⅔ L₊ + ⅓ L×` blends the axial and the
/// rotated five-point Laplacians, `K = sx sy ω²/c²` and `B` spreads mass as
/// `⅔` on the cell plus `1/12` on each axial neighbour. Inside the PML the
/// rotated share fades out, leaving the stretched axial Laplacian. Every
/// coefficient lives on an edge, so the matrix is complex symmetric.
#[derive(Debug, Clone)]
pub struct HelmholtzOperator {
    m: usize,
    inv_dx2: f64,
    /// x-edges: `m` rows of `m + 1` faces; face `f` joins cells `f - 1` and `f`.
    ex: Vec<C64>,
    /// y-edges: `m + 1` faces of `m` columns.
    ey: Vec<C64>,
    /// Diagonal edges indexed by corner `(fx, fy)`, joining `(fx-1, fy-1)`
    /// and `(fx, fy)`.
    ed: Vec<C64>,
    /// Anti-diagonal edges indexed by corner `(fx, fy)`, joining
    /// `(fx, fy-1)` and `(fx-1, fy)`.
    ea: Vec<C64>,
    /// `K = sx sy ω²/c²` per cell.
    k2: Vec<C64>,
    /// `sx sy` per cell.
    weight: Vec<C64>,
    /// Diagonal entry of the assembled matrix.
    diag: Vec<C64>,
    omega: f64,
}

fn rotated_share(grid: &Grid2D, xi_x: f64, xi_y: f64) -> f64 {
    let ramp = |xi: f64| {
        let p = grid.pml_thickness as f64;
        let depth = (p - xi).max(xi - p - grid.n as f64).max(0.0);
        if depth >= ROTATED_RAMP {
            0.0
        } else {
            let c = libm::cos(0.5 * core::f64::consts::PI * depth / ROTATED_RAMP);
            c * c
        }
    };
    ROTATED_SHARE * ramp(xi_x) * ramp(xi_y)
}

impl HelmholtzOperator {
    pub fn new(medium: &Medium, grid: &Grid2D, omega: f64) -> Result<Self, WaveError> {
        medium.validate()?;
        if medium.n() != grid.n {
            return Err(WaveError::Shape {
                what: "medium side",
                expected: grid.n,
                got: medium.n(),
            });
        }
        if !(omega > 0.0) {
            return Err(WaveError::InvalidConfig("omega must be positive"));
        }
        let m = grid.total();
        let p = grid.pml_thickness;
        let zero = C64::new(0.0, 0.0);
        let centers: Vec<C64> = (0..m).map(|t| grid.stretch(t as f64 + 0.5, omega)).collect();
        let faces: Vec<C64> = (0..=m).map(|t| grid.stretch(t as f64, omega)).collect();

        let mut ex = vec![zero; m * (m + 1)];
        for ty in 0..m {
            for f in 0..=m {
                let theta = rotated_share(grid, f as f64, ty as f64 + 0.5);
                ex[ty * (m + 1) + f] = centers[ty] / faces[f] * (1.0 - theta);
            }
        }
        let mut ey = vec![zero; (m + 1) * m];
        for f in 0..=m {
            for tx in 0..m {
                let theta = rotated_share(grid, tx as f64 + 0.5, f as f64);
                ey[f * m + tx] = centers[tx] / faces[f] * (1.0 - theta);
            }
        }
        let mut ed = vec![zero; (m + 1) * (m + 1)];
        for fy in 1..m {
            for fx in 1..m {
                let theta = rotated_share(grid, fx as f64, fy as f64);
                if theta == 0.0 {
                    continue;
                }
                let (sx, sy) = (faces[fx], faces[fy]);
                let gamma = 0.5 * (sy / sx + sx / sy);
                ed[fy * (m + 1) + fx] = gamma * (0.5 * theta);
            }
        }
        let ea = ed.clone();

        let c_at = |tx: usize, ty: usize| -> f64 {
            if tx >= p && tx < p + grid.n && ty >= p && ty < p + grid.n {
                medium.c.data()[(ty - p) * grid.n + tx - p]
            } else {
                medium.c_background
            }
        };
        let mut k2 = vec![zero; m * m];
        let mut weight = vec![zero; m * m];
        for ty in 0..m {
            for tx in 0..m {
                let w = centers[tx] * centers[ty];
                let c = c_at(tx, ty);
                weight[ty * m + tx] = w;
                k2[ty * m + tx] = w * (omega * omega / (c * c));
            }
        }
        let mut op = Self {
            m,
            inv_dx2: 1.0 / (grid.dx * grid.dx),
            ex,
            ey,
            ed,
            ea,
            k2,
            weight,
            diag: Vec::new(),
            omega,
        };
        op.diag = (0..m * m)
            .map(|i| {
                let off: C64 = op.neighbours(i).map(|(_, coef, _)| coef).sum();
                op.k2[i] * MASS_CENTER - off * op.inv_dx2
            })
            .collect();
        Ok(op)
    }

    /// `(neighbour index, Laplacian edge coefficient, is axial)` for the up
    /// to eight neighbours of cell `i`.
    fn neighbours(&self, i: usize) -> impl Iterator<Item = (usize, C64, bool)> + '_ {
        let m = self.m;
        let (ty, tx) = (i / m, i % m);
        let w = m + 1;
        let left = (tx > 0).then(|| (i - 1, self.ex[ty * w + tx], true));
        let right = (tx + 1 < m).then(|| (i + 1, self.ex[ty * w + tx + 1], true));
        let down = (ty > 0).then(|| (i - m, self.ey[ty * m + tx], true));
        let up = (ty + 1 < m).then(|| (i + m, self.ey[(ty + 1) * m + tx], true));
        let sw = (tx > 0 && ty > 0).then(|| (i - m - 1, self.ed[ty * w + tx], false));
        let ne = (tx + 1 < m && ty + 1 < m).then(|| (i + m + 1, self.ed[(ty + 1) * w + tx + 1], false));
        let se = (tx + 1 < m && ty > 0).then(|| (i - m + 1, self.ea[ty * w + tx + 1], false));
        let nw = (tx > 0 && ty + 1 < m).then(|| (i + m - 1, self.ea[(ty + 1) * w + tx], false));
        [left, right, down, up, sw, ne, se, nw].into_iter().flatten()
    }

    pub fn side(&self) -> usize {
        self.m
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Stretching weight `sx sy` at full-grid index `idx` (1 in the interior).
    pub fn weight(&self, idx: usize) -> C64 {
        self.weight[idx]
    }

    /// Matrix entry `A[i][j]`; nonzero only for the nine-point neighbourhood.
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        if i == j {
            return self.diag[i];
        }
        self.neighbours(i)
            .find(|&(nb, _, _)| nb == j)
            .map_or(C64::new(0.0, 0.0), |(_, coef, axial)| {
                let mut v = coef * self.inv_dx2;
                if axial {
                    v += (self.k2[i] + self.k2[j]) * (0.5 * MASS_AXIAL);
                }
                v
            })
    }

    /// Apply the mass distribution `B` (symmetric, real weights).
    pub fn apply_mass_distribution(&self, v: &[C64]) -> Vec<C64> {
        let m = self.m;
        (0..m * m)
            .map(|i| {
                let (ty, tx) = (i / m, i % m);
                let mut s = v[i] * MASS_CENTER;
                if tx > 0 {
                    s += v[i - 1] * MASS_AXIAL;
                }
                if tx + 1 < m {
                    s += v[i + 1] * MASS_AXIAL;
                }
                if ty > 0 {
                    s += v[i - m] * MASS_AXIAL;
                }
                if ty + 1 < m {
                    s += v[i + m] * MASS_AXIAL;
                }
                s
            })
            .collect()
    }

    /// Banded LU of the assembled operator (bandwidth = grid side + 1).
    pub fn factor(&self) -> Result<BandedLu, WaveError> {
        let m = self.m;
        BandedLu::factor(m * m, m + 1, |i, j| self.entry(i, j))
    }
}

impl LinearOperator for HelmholtzOperator {
    fn dim(&self) -> usize {
        self.m * self.m
    }

    fn apply(&self, u: &[C64], out: &mut [C64]) {
        let h = self.inv_dx2;
        let half_axial = 0.5 * MASS_AXIAL;
        for (i, o) in out.iter_mut().enumerate() {
            let ki = self.k2[i];
            let mut acc = self.diag[i] * u[i];
            for (j, coef, axial) in self.neighbours(i) {
                let mut a = coef * h;
                if axial {
                    a += (ki + self.k2[j]) * half_axial;
                }
                acc += a * u[j];
            }
            *o = acc;
        }
    }
}

/// `(Δ̃ + ω²/c²) u` for a field on the full grid.
pub fn apply_helmholtz(
    field: &ComplexField,
    medium: &Medium,
    grid: &Grid2D,
    omega: f64,
) -> Result<ComplexField, WaveError> {
    let op = HelmholtzOperator::new(medium, grid, omega)?;
    if field.m != op.side() || field.data.len() != op.dim() {
        return Err(WaveError::Shape {
            what: "field",
            expected: op.dim(),
            got: field.data.len(),
        });
    }
    let mut out = ComplexField::zeros(field.m);
    op.apply(&field.data, &mut out.data);
    Ok(out)
}

/// Which preconditioner GMRES uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreconditionerKind {
    /// Plain GMRES.
    None,
    /// Banded LU of the homogeneous background operator.
    Background,
    /// Banded LU of the operator itself (GMRES then verifies and refines).
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub gmres: GmresConfig,
    pub preconditioner: PreconditionerKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gmres: GmresConfig::default(),
            preconditioner: PreconditionerKind::Exact,
        }
    }
}

impl SolverConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.gmres.tol = tol;
        self
    }
}

/// A Helmholtz operator paired with its preconditioner, reusable across
/// right-hand sides.
pub struct HelmholtzSolver {
    pub op: HelmholtzOperator,
    precond: Option<BandedLu>,
    cfg: GmresConfig,
}

impl HelmholtzSolver {
    pub fn new(medium: &Medium, grid: &Grid2D, omega: f64, cfg: &SolverConfig) -> Result<Self, WaveError> {
        let op = HelmholtzOperator::new(medium, grid, omega)?;
        let precond = match cfg.preconditioner {
            PreconditionerKind::None => None,
            PreconditionerKind::Exact => Some(op.factor()?),
            PreconditionerKind::Background => {
                let bg = Medium::homogeneous(grid.n, medium.c_background);
                Some(HelmholtzOperator::new(&bg, grid, omega)?.factor()?)
            }
        };
        Ok(Self {
            op,
            precond,
            cfg: cfg.gmres,
        })
    }

    /// Solve `A u = b` for an arbitrary right-hand side on the full grid.
    pub fn solve_rhs(&self, b: &[C64]) -> Result<(Vec<C64>, GmresStats), WaveError> {
        let mut x = vec![C64::new(0.0, 0.0); b.len()];
        let pc: &dyn Preconditioner = match &self.precond {
            Some(lu) => lu,
            None => &krylov::Identity,
        };
        let stats = krylov::gmres(&self.op, pc, b, &mut x, &self.cfg)?;
        Ok((x, stats))
    }

    pub fn solve(&self, source: &SourceTerm, grid: &Grid2D) -> Result<(ComplexField, GmresStats), WaveError> {
        let b = source.rhs(grid)?;
        let (data, stats) = self.solve_rhs(&b)?;
        Ok((
            ComplexField {
                m: self.op.side(),
                data,
            },
            stats,
        ))
    }
}

/// Solve the Helmholtz equation for one point source with restarted GMRES.
pub fn gmres_solve(
    medium: &Medium,
    grid: &Grid2D,
    source: &SourceTerm,
    cfg: &SolverConfig,
) -> Result<(ComplexField, GmresStats), WaveError> {
    HelmholtzSolver::new(medium, grid, source.omega, cfg)?.solve(source, grid)
}

/// Complex `n_src x n_rec` matrix of receiver samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    pub n_src: usize,
    pub n_rec: usize,
    pub values: Vec<C64>,
    pub noise_snr_db: Option<f64>,
}

impl MeasurementMatrix {
    pub fn new(n_src: usize, n_rec: usize, values: Vec<C64>) -> Result<Self, WaveError> {
        if values.len() != n_src * n_rec {
            return Err(WaveError::Shape {
                what: "measurement matrix",
                expected: n_src * n_rec,
                got: values.len(),
            });
        }
        Ok(Self {
            n_src,
            n_rec,
            values,
            noise_snr_db: None,
        })
    }

    pub fn get(&self, s: usize, r: usize) -> C64 {
        self.values[s * self.n_rec + r]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `||M - Mᵀ|| / ||M||`.
    pub fn relative_asymmetry(&self) -> f64 {
        let mut diff = 0.0;
        for s in 0..self.n_src {
            for r in 0..self.n_rec.min(self.n_src) {
                diff += (self.get(s, r) - self.get(r, s)).norm_sqr();
            }
        }
        libm::sqrt(diff / self.norm_sqr())
    }
}

/// Full-grid indices of the sensor cells of `geometry`.
pub fn sensor_indices(grid: &Grid2D, geometry: &SensorGeometry) -> Result<Vec<usize>, WaveError> {
    geometry
        .positions()
        .iter()
        .map(|&(x, y)| match (grid.nearest_index(x), grid.nearest_index(y)) {
            (Some(ix), Some(iy)) => Ok(grid.full_index(ix, iy)),
            _ => Err(WaveError::SensorOutside { x, y }),
        })
        .collect()
}

/// Interior `(ix, iy)` cells of the sensors.
pub fn sensor_cells(grid: &Grid2D, geometry: &SensorGeometry) -> Result<Vec<(usize, usize)>, WaveError> {
    geometry
        .positions()
        .iter()
        .map(|&(x, y)| match (grid.nearest_index(x), grid.nearest_index(y)) {
            (Some(ix), Some(iy)) => Ok((ix, iy)),
            _ => Err(WaveError::SensorOutside { x, y }),
        })
        .collect()
}

/// Forward-solve every source of `geometry` and sample all receivers.
pub fn simulate_measurements(
    medium: &Medium,
    grid: &Grid2D,
    geometry: &SensorGeometry,
    omega: f64,
    cfg: &SolverConfig,
) -> Result<MeasurementMatrix, WaveError> {
    let solver = HelmholtzSolver::new(medium, grid, omega, cfg)?;
    let fields = solve_all_sources(&solver, grid, geometry, omega)?;
    let receivers = sensor_indices(grid, geometry)?;
    sample_receivers(&fields, &receivers)
}

/// One forward field per source, in sensor order.
pub fn solve_all_sources(
    solver: &HelmholtzSolver,
    grid: &Grid2D,
    geometry: &SensorGeometry,
    omega: f64,
) -> Result<Vec<ComplexField>, WaveError> {
    sensor_cells(grid, geometry)?
        .into_iter()
        .enumerate()
        .map(|(index, (ix, iy))| {
            solver
                .solve(&SourceTerm::unit(ix, iy, omega), grid)
                .map(|(u, _)| u)
                .map_err(|e| WaveError::Source {
                    index,
                    source: Box::new(e),
                })
        })
        .collect()
}

pub fn sample_receivers(fields: &[ComplexField], receivers: &[usize]) -> Result<MeasurementMatrix, WaveError> {
    let values = fields
        .iter()
        .flat_map(|u| receivers.iter().map(move |&r| u.data[r]))
        .collect();
    MeasurementMatrix::new(fields.len(), receivers.len(), values)
}

/// Add circular complex Gaussian noise at `snr_db` relative to the matrix
/// energy. `f64::INFINITY` leaves the matrix unchanged.
pub fn add_noise<R: Rng + ?Sized>(m: &MeasurementMatrix, snr_db: f64, rng: &mut R) -> MeasurementMatrix {
    let mut out = m.clone();
    if snr_db == f64::INFINITY {
        return out;
    }
    let count = m.values.len() as f64;
    let signal = m.norm_sqr() / count;
    // E|n|² = 2σ² per entry
    let sigma = libm::sqrt(signal / (2.0 * libm::pow(10.0, snr_db / 10.0)));
    for v in &mut out.values {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += C64::new(re, im) * sigma;
    }
    out.noise_snr_db = Some(snr_db);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op_desk() -> (Grid2D, Medium, HelmholtzOperator) {
        let grid = Grid2D::with_default_pml(32, DX).unwrap();
        let med = Medium::homogeneous(32, C_BACKGROUND);
        let op = HelmholtzOperator::new(&med, &grid, OMEGA).unwrap();
        (grid, med, op)
    }

    #[test]
    fn grid_invariants() {
        assert!(Grid2D::new(8, DX, 16, 1.0).is_err());
        assert!(Grid2D::new(32, 0.0, 16, 1.0).is_err());
        assert!(Grid2D::new(32, DX, 4, 1.0).is_err());
        assert_eq!(Grid2D::desk().total(), 96);
    }

    #[test]
    fn zero_field_maps_to_zero() {
        let (grid, med, _) = op_desk();
        let u = ComplexField::zeros(grid.total());
        let out = apply_helmholtz(&u, &med, &grid, OMEGA).unwrap();
        assert!(out.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn constant_field_interior_gives_k_squared() {
        let (grid, med, op) = op_desk();
        let m = grid.total();
        let u = ComplexField {
            m,
            data: vec![C64::new(1.0, 0.0); m * m],
        };
        let out = apply_helmholtz(&u, &med, &grid, OMEGA).unwrap();
        let k2 = OMEGA * OMEGA / (C_BACKGROUND * C_BACKGROUND);
        let centre = grid.full_index(16, 16);
        assert!((out.data[centre] - C64::new(k2, 0.0)).norm() < 1e-9 * k2);
        // the PML corner is where the stretched coefficients differ most
        assert_eq!(op.entry(0, m + 1), op.entry(m + 1, 0));
    }

    #[test]
    fn operator_matches_assembled_entries() {
        let (grid, _, op) = op_desk();
        let m = grid.total();
        let n = m * m;
        let u: Vec<C64> = (0..n).map(|i| C64::new(libm::sin(i as f64), libm::cos(3.0 * i as f64))).collect();
        let mut y = vec![C64::new(0.0, 0.0); n];
        op.apply(&u, &mut y);
        for &i in &[0, 5, m + 3, n / 2, n - 1] {
            let lo = i.saturating_sub(m + 1);
            let hi = (i + m + 1).min(n - 1);
            let s: C64 = (lo..=hi).map(|j| op.entry(i, j) * u[j]).sum();
            assert!((s - y[i]).norm() < 1e-9 * y[i].norm().max(1.0));
        }
        // complex symmetry
        for &i in &[1, m + 7, n / 3] {
            for j in [i + 1, i + m - 1, i + m, i + m + 1] {
                assert_eq!(op.entry(i, j), op.entry(j, i));
            }
        }
    }

    #[test]
    fn noise_infinite_snr_is_identity() {
        use rand::SeedableRng;
        let m = MeasurementMatrix::new(2, 2, vec![C64::new(1.0, 2.0); 4]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_noise(&m, f64::INFINITY, &mut rng), m);
    }

    #[test]
    fn wavelength_resolution_matches_thirteen_points() {
        let ppw = Grid2D::paper().wavelength(OMEGA, C_BACKGROUND) / DX;
        assert!((ppw - 13.82).abs() < 0.01, "{ppw}");
    }
}
