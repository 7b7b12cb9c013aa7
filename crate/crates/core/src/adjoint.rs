//! Backprojection: the gradient of the squared measurement misfit with
//! respect to the wave speed, computed with the adjoint-state method.
//!
//! With `A(c) u_s = b_s` for source `s` and receivers sampled by `P`, a speed
//! perturbation `δc` changes the operator by `½(B D + D B)` where
//! `D = diag(-2ω²/c³ δc)`, so the tangent field solves
//! `A δu_s = -½(B D + D B) u_s`. Since `A` is complex symmetric the adjoint
//! field for a receiver residual `r_s` is `λ_s = A⁻¹ Pᵀ conj(r_s)` and
//!
//! ```text
//! (Jᵀ r)_j = Σ_s Re[ ω²/c_j³ ((B λ_s)_j u_s,j + λ_s,j (B u_s)_j) ]
//! ```
//!
//! The inner product on measurements is `<a, b> = Re(aᴴ b)`, on images the
//! plain Euclidean one.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;

use crate::scene::SensorGeometry;
use crate::tensor::Tensor;
use crate::wave::{
    self, sample_receivers, sensor_indices, ComplexField, Grid2D, HelmholtzSolver, MeasurementMatrix, Medium,
    SolverConfig, WaveError,
};

/// `‖y_obs − y_pred‖²`, summing squared moduli.
pub fn misfit(y_obs: &MeasurementMatrix, y_pred: &MeasurementMatrix) -> Result<f64, WaveError> {
    if y_obs.n_src != y_pred.n_src || y_obs.n_rec != y_pred.n_rec {
        return Err(WaveError::Shape {
            what: "measurement matrices",
            expected: y_obs.values.len(),
            got: y_pred.values.len(),
        });
    }
    Ok(y_obs.values.iter().zip(&y_pred.values).map(|(a, b)| (a - b).norm_sqr()).sum())
}

/// Real inner product `Re(aᴴ b)` of two measurement matrices.
pub fn measurement_inner(a: &MeasurementMatrix, b: &MeasurementMatrix) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x.conj() * y).re).sum()
}

/// Forward fields and receiver Green's functions at a fixed linearization
/// medium. Building one costs a factorization plus `n_src + n_rec` solves;
/// each backprojection afterwards is solve-free.
pub struct Backprojector {
    grid: Grid2D,
    omega: f64,
    medium: Medium,
    solver: HelmholtzSolver,
    receivers: Vec<usize>,
    /// Forward field per source.
    fields: Vec<ComplexField>,
    /// `B u_s` per source.
    mass_fields: Vec<Vec<C64>>,
    /// `A⁻¹ e_r` per receiver.
    green: Vec<Vec<C64>>,
    predicted: MeasurementMatrix,
}

impl Backprojector {
    pub fn new(
        medium: &Medium,
        grid: &Grid2D,
        geometry: &SensorGeometry,
        omega: f64,
        cfg: &SolverConfig,
    ) -> Result<Self, WaveError> {
        let solver = HelmholtzSolver::new(medium, grid, omega, cfg)?;
        let fields = wave::solve_all_sources(&solver, grid, geometry, omega)?;
        let receivers = sensor_indices(grid, geometry)?;
        let predicted = sample_receivers(&fields, &receivers)?;
        let mass_fields = fields.iter().map(|u| solver.op.apply_mass_distribution(&u.data)).collect();
        let dim = solver.op.side() * solver.op.side();
        let green = receivers
            .iter()
            .map(|&r| {
                let mut e = vec![C64::new(0.0, 0.0); dim];
                e[r] = C64::new(1.0, 0.0);
                solver.solve_rhs(&e).map(|(g, _)| g)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            grid: *grid,
            omega,
            medium: medium.clone(),
            solver,
            receivers,
            fields,
            mass_fields,
            green,
            predicted,
        })
    }

    /// Linearization at the homogeneous background medium.
    pub fn background(
        grid: &Grid2D,
        geometry: &SensorGeometry,
        omega: f64,
        c_background: f64,
        cfg: &SolverConfig,
    ) -> Result<Self, WaveError> {
        Self::new(&Medium::homogeneous(grid.n, c_background), grid, geometry, omega, cfg)
    }

    /// `ŷ(x_lin)`: noise-free measurements of the linearization medium.
    pub fn predicted(&self) -> &MeasurementMatrix {
        &self.predicted
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    /// `ω²/c³` over the physical grid, in full-grid order of `physical_cells`.
    fn sensitivity(&self, ix: usize, iy: usize) -> f64 {
        let c = self.medium.c.data()[iy * self.grid.n + ix];
        self.omega * self.omega / (c * c * c)
    }

    fn check_image(&self, dc: &Tensor) -> Result<(), WaveError> {
        let n = self.grid.n;
        if dc.shape() != [n, n] {
            return Err(WaveError::Shape {
                what: "speed perturbation",
                expected: n * n,
                got: dc.len(),
            });
        }
        Ok(())
    }

    /// Tangent-linear map `J δc`: one extra solve per source.
    pub fn jacobian_apply(&self, dc: &Tensor) -> Result<MeasurementMatrix, WaveError> {
        self.check_image(dc)?;
        let n = self.grid.n;
        let dim = self.solver.op.side() * self.solver.op.side();
        // d_j = ∂K_j/∂c_j δc_j = -2 ω²/c³ δc in the physical region
        let mut d = vec![0.0; dim];
        for iy in 0..n {
            for ix in 0..n {
                d[self.grid.full_index(ix, iy)] = -2.0 * self.sensitivity(ix, iy) * dc.data()[iy * n + ix];
            }
        }
        let mut values = Vec::with_capacity(self.fields.len() * self.receivers.len());
        for (s, (u, bu)) in self.fields.iter().zip(&self.mass_fields).enumerate() {
            let du: Vec<C64> = u.data.iter().zip(&d).map(|(v, dj)| v * *dj).collect();
            let bdu = self.solver.op.apply_mass_distribution(&du);
            let rhs: Vec<C64> = bdu
                .iter()
                .zip(bu.iter().zip(&d))
                .map(|(a, (b, dj))| -0.5 * (a + b * *dj))
                .collect();
            let (delta, _) = self.solver.solve_rhs(&rhs).map_err(|e| WaveError::Source {
                index: s,
                source: alloc::boxed::Box::new(e),
            })?;
            values.extend(self.receivers.iter().map(|&r| delta[r]));
        }
        MeasurementMatrix::new(self.fields.len(), self.receivers.len(), values)
    }

    /// Adjoint map `Jᵀ δy` with respect to `<a, b> = Re(aᴴ b)`.
    pub fn jacobian_adjoint(&self, dy: &MeasurementMatrix) -> Result<Tensor, WaveError> {
        if dy.n_src != self.fields.len() || dy.n_rec != self.receivers.len() {
            return Err(WaveError::Shape {
                what: "measurement residual",
                expected: self.fields.len() * self.receivers.len(),
                got: dy.values.len(),
            });
        }
        let n = self.grid.n;
        let dim = self.solver.op.side() * self.solver.op.side();
        let mut acc = vec![0.0; n * n];
        let mut lambda = vec![C64::new(0.0, 0.0); dim];
        for (s, (u, bu)) in self.fields.iter().zip(&self.mass_fields).enumerate() {
            // λ_s = A⁻¹ Pᵀ conj(δy_s) as a combination of receiver Green's functions
            lambda.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
            for (r, g) in self.green.iter().enumerate() {
                let w = dy.get(s, r).conj();
                if w == C64::new(0.0, 0.0) {
                    continue;
                }
                for (l, gv) in lambda.iter_mut().zip(g) {
                    *l += w * gv;
                }
            }
            let blam = self.solver.op.apply_mass_distribution(&lambda);
            for iy in 0..n {
                for ix in 0..n {
                    let j = self.grid.full_index(ix, iy);
                    let term = blam[j] * u.data[j] + lambda[j] * bu[j];
                    acc[iy * n + ix] += self.sensitivity(ix, iy) * term.re;
                }
            }
        }
        Tensor::new(&[n, n], acc).map_err(|_| WaveError::InvalidConfig("image allocation"))
    }

    /// `∂/∂c ‖y_obs − ŷ(c)‖²` at the linearization medium, i.e. `2 Jᵀ (ŷ − y_obs)`.
    pub fn backproject(&self, y_obs: &MeasurementMatrix) -> Result<Tensor, WaveError> {
        misfit(y_obs, &self.predicted)?;
        let values = self.predicted.values.iter().zip(&y_obs.values).map(|(p, o)| (p - o) * 2.0).collect();
        let residual = MeasurementMatrix::new(y_obs.n_src, y_obs.n_rec, values)?;
        self.jacobian_adjoint(&residual)
    }
}

/// Per-image standardization to zero mean and unit variance. Returns the
/// image with the `(mean, std)` that were removed. A constant image maps to
/// zeros with `std = 1`.
pub fn standardize(img: &Tensor) -> (Tensor, f64, f64) {
    let mean = img.mean();
    let var = img.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / img.len() as f64;
    let std = if var > 0.0 { libm::sqrt(var) } else { 1.0 };
    (img.map(|v| (v - mean) / std), mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_geometry, View};
    use crate::wave::{C_BACKGROUND, DX, OMEGA};

    #[test]
    fn misfit_of_three_four_i_is_25() {
        let a = MeasurementMatrix::new(1, 2, vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]).unwrap();
        let b = MeasurementMatrix::new(1, 2, vec![C64::new(4.0, 4.0), C64::new(0.0, 0.0)]).unwrap();
        assert_eq!(misfit(&a, &b).unwrap(), 25.0);
        assert_eq!(misfit(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn misfit_shape_mismatch() {
        let a = MeasurementMatrix::new(1, 2, vec![C64::new(0.0, 0.0); 2]).unwrap();
        let b = MeasurementMatrix::new(2, 1, vec![C64::new(0.0, 0.0); 2]).unwrap();
        assert!(misfit(&a, &b).is_err());
    }

    #[test]
    fn zero_mismatch_gives_zero_image() {
        let grid = Grid2D::with_default_pml(32, DX).unwrap();
        let geo = build_geometry(View::Full, 8, &grid).unwrap();
        let bp = Backprojector::background(&grid, &geo, OMEGA, C_BACKGROUND, &SolverConfig::default()).unwrap();
        let img = bp.backproject(&bp.predicted().clone()).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_moments() {
        let img = Tensor::from_fn(&[4, 4], |i| (i * i) as f64);
        let (s, mean, std) = standardize(&img);
        assert!(s.mean().abs() < 1e-12);
        assert!((s.norm_sq() / 16.0 - 1.0).abs() < 1e-12);
        assert!(std > 0.0 && mean > 0.0);
        let (z, _, std) = standardize(&Tensor::full(&[2, 2], 3.0));
        assert_eq!(std, 1.0);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }
}
