//! Helmholtz solver checks against closed-form oracles.

use num_complex::Complex64 as C64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uflow_core::krylov::{GmresConfig, LinearOperator};
use uflow_core::scene::{build_geometry, EllipseSpec, rasterize, View};
use uflow_core::wave::*;

/// `|(i/4) H0⁽¹⁾(kr)| = sqrt(J0² + Y0²) / 4`.
fn hankel_magnitude(kr: f64) -> f64 {
    libm::hypot(libm::j0(kr), libm::y0(kr)) / 4.0
}

/// Largest relative deviation from the free-space Green's function over
/// the annulus `[2λ, 4λ]` around a centred source.
fn green_error(grid: &Grid2D, cfg: &SolverConfig) -> f64 {
    let med = Medium::homogeneous(grid.n, C_BACKGROUND);
    let (sx, sy) = (grid.n / 2, grid.n / 2);
    let (u, _) = gmres_solve(&med, grid, &SourceTerm::unit(sx, sy, OMEGA), cfg).unwrap();
    let k = OMEGA / C_BACKGROUND;
    let lam = grid.wavelength(OMEGA, C_BACKGROUND);
    let mut worst = 0.0f64;
    for iy in 0..grid.n {
        for ix in 0..grid.n {
            let r = libm::hypot(grid.coord(ix) - grid.coord(sx), grid.coord(iy) - grid.coord(sy));
            if r < 2.0 * lam || r > 4.0 * lam {
                continue;
            }
            let want = hankel_magnitude(k * r);
            let got = u.data[grid.full_index(ix, iy)].norm();
            worst = worst.max((got - want).abs() / want);
        }
    }
    worst
}

#[test]
fn green_function_within_two_percent_desk() {
    let err = green_error(&Grid2D::desk(), &SolverConfig::default());
    assert!(err < 0.02, "max relative error {err}");
}

#[test]
fn zero_source_gives_zero_field() {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let med = Medium::homogeneous(32, C_BACKGROUND);
    let mut src = SourceTerm::unit(16, 16, OMEGA);
    src.amplitude = C64::new(0.0, 0.0);
    let (u, stats) = gmres_solve(&med, &grid, &src, &SolverConfig::default()).unwrap();
    assert_eq!(stats.iterations, 0);
    assert_eq!(u.norm(), 0.0);
}

#[test]
fn returned_solutions_meet_the_residual_contract() {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let med = Medium::homogeneous(32, C_BACKGROUND);
    for (kind, tol) in [
        (PreconditionerKind::Exact, 1e-10),
        (PreconditionerKind::Background, 1e-8),
        (PreconditionerKind::None, 1e-6),
    ] {
        let cfg = SolverConfig {
            gmres: GmresConfig {
                tol,
                restart: 50,
                max_restarts: 100,
            },
            preconditioner: kind,
        };
        let src = SourceTerm::unit(10, 20, OMEGA);
        let (u, stats) = gmres_solve(&med, &grid, &src, &cfg).unwrap();
        let op = HelmholtzOperator::new(&med, &grid, OMEGA).unwrap();
        let b = src.rhs(&grid).unwrap();
        let mut au = vec![C64::new(0.0, 0.0); b.len()];
        op.apply(&u.data, &mut au);
        let res: f64 = au.iter().zip(&b).map(|(a, g)| (a - g).norm_sqr()).sum::<f64>().sqrt();
        let bn: f64 = b.iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt();
        assert!(res / bn <= tol * 1.0001, "{kind:?}: {} > {tol}", res / bn);
        assert!(stats.relative_residual <= tol);
    }
}

#[test]
fn too_few_iterations_report_the_residual() {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let med = Medium::homogeneous(32, C_BACKGROUND);
    let cfg = SolverConfig {
        gmres: GmresConfig {
            tol: 1e-10,
            restart: 5,
            max_restarts: 1,
        },
        preconditioner: PreconditionerKind::None,
    };
    match gmres_solve(&med, &grid, &SourceTerm::unit(16, 16, OMEGA), &cfg) {
        Err(WaveError::NotConverged { relative_residual, iterations }) => {
            assert!(relative_residual > 1e-10 && relative_residual.is_finite());
            assert_eq!(iterations, 10);
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn plane_wave_residual_is_small_in_the_interior() {
    // The fourth-order scheme leaves an O(dx⁴ k⁶) residual per point; the
    // Taylor bound below is the leading truncation term with a margin of 2.
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let med = Medium::homogeneous(32, C_BACKGROUND);
    let m = grid.total();
    let k = OMEGA / C_BACKGROUND;
    let x0 = grid.coord(0) - grid.pml_thickness as f64 * grid.dx;
    let data = (0..m * m)
        .map(|i| {
            let x = x0 + (i % m) as f64 * grid.dx;
            C64::new(0.0, k * x).exp()
        })
        .collect();
    let out = apply_helmholtz(&ComplexField { m, data }, &med, &grid, OMEGA).unwrap();
    let h = grid.dx;
    let bound = 2.0 * libm::pow(k, 6.0) * libm::pow(h, 4.0) / 360.0 * 4.0;
    for iy in 4..28 {
        for ix in 4..28 {
            let r = out.data[grid.full_index(ix, iy)].norm();
            assert!(r < bound, "residual {r} at ({ix},{iy}) exceeds {bound}");
        }
    }
    // far below k² (what the Laplacian and mass term cancel)
    assert!(bound < 1e-3 * k * k);
}

#[test]
fn solution_is_linear_in_the_source() {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let med = Medium::homogeneous(32, C_BACKGROUND);
    let solver = HelmholtzSolver::new(&med, &grid, OMEGA, &SolverConfig::default().with_tol(1e-10)).unwrap();
    let mut s1 = SourceTerm::unit(8, 9, OMEGA);
    s1.amplitude = C64::new(0.7, -0.2);
    let mut s2 = SourceTerm::unit(20, 14, OMEGA);
    s2.amplitude = C64::new(-1.3, 0.5);
    let b: Vec<C64> = s1.rhs(&grid).unwrap().iter().zip(s2.rhs(&grid).unwrap()).map(|(a, b)| a + b).collect();
    let (u12, _) = solver.solve_rhs(&b).unwrap();
    let (u1, _) = solver.solve(&s1, &grid).unwrap();
    let (u2, _) = solver.solve(&s2, &grid).unwrap();
    let diff: f64 = u12
        .iter()
        .zip(u1.data.iter().zip(&u2.data))
        .map(|(a, (b, c))| (a - b - c).norm_sqr())
        .sum::<f64>()
        .sqrt();
    let scale: f64 = u12.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    assert!(diff / scale < 1e-9, "{}", diff / scale);
}

#[test]
fn pml_keeps_the_outer_boundary_quiet() {
    let grid = Grid2D::desk();
    let med = Medium::homogeneous(grid.n, C_BACKGROUND);
    let (u, _) = gmres_solve(&med, &grid, &SourceTerm::unit(32, 32, OMEGA), &SolverConfig::default()).unwrap();
    let m = grid.total();
    let peak = u.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let edge = (0..m)
        .flat_map(|i| [u.data[i], u.data[(m - 1) * m + i], u.data[i * m], u.data[i * m + m - 1]])
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    assert!(edge < 1e-3 * peak, "edge/peak = {}", edge / peak);
}

#[test]
fn halving_dx_reduces_green_error_at_least_fourfold() {
    // same physical domain and absorbing layer, twice the resolution
    let coarse = Grid2D::with_default_pml(48, DX).unwrap();
    let fine = Grid2D::new(96, 0.5 * DX, 2 * coarse.pml_thickness, coarse.pml_strength).unwrap();
    let cfg = SolverConfig::default();
    let (ec, ef) = (green_error(&coarse, &cfg), green_error(&fine, &cfg));
    assert!(ec / ef >= 4.0, "coarse {ec}, fine {ef}, ratio {}", ec / ef);
}

#[test]
fn measurement_matrix_is_reciprocal() {
    let grid = Grid2D::desk();
    let geo = build_geometry(View::Full, 16, &grid).unwrap();
    let med = Medium::homogeneous(grid.n, C_BACKGROUND);
    let y = simulate_measurements(&med, &grid, &geo, OMEGA, &SolverConfig::default()).unwrap();
    assert_eq!((y.n_src, y.n_rec), (16, 16));
    assert!(y.values.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    assert!(y.relative_asymmetry() < 1e-3, "{}", y.relative_asymmetry());
}

#[test]
fn paper_geometry_has_32_by_32_measurements() {
    let grid = Grid2D::paper();
    let geo = build_geometry(View::Full, 32, &grid).unwrap();
    assert_eq!(sensor_indices(&grid, &geo).unwrap().len(), 32);
}

#[test]
fn scatterer_changes_the_measurements() {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let geo = build_geometry(View::Full, 8, &grid).unwrap();
    let bg = Medium::homogeneous(32, C_BACKGROUND);
    let e = EllipseSpec {
        center: (0.002, -0.001),
        semi_axes: (0.003, 0.002),
        rotation: 0.3,
        speed_contrast: 1.5,
    };
    let med = rasterize(&[e], &grid, C_BACKGROUND);
    let cfg = SolverConfig::default();
    let y0 = simulate_measurements(&bg, &grid, &geo, OMEGA, &cfg).unwrap();
    let y1 = simulate_measurements(&med, &grid, &geo, OMEGA, &cfg).unwrap();
    let diff: f64 = y0.values.iter().zip(&y1.values).map(|(a, b)| (a - b).norm_sqr()).sum();
    assert!(diff > 1e-6 * y0.norm_sqr());
}

#[test]
fn noise_hits_the_target_snr_on_average() {
    let values = (0..256).map(|i| C64::new(libm::sin(i as f64), libm::cos(0.3 * i as f64))).collect();
    let clean = MeasurementMatrix::new(16, 16, values).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 1000;
    let mut noise = 0.0;
    for _ in 0..draws {
        let noisy = add_noise(&clean, DEFAULT_SNR_DB, &mut rng);
        noise += noisy.values.iter().zip(&clean.values).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
    }
    let snr = 10.0 * libm::log10(clean.norm_sqr() / (noise / draws as f64));
    assert!((snr - 30.0).abs() < 0.5, "empirical snr {snr}");
}

#[test]
fn sixteen_by_sixteen_grid_is_the_smallest() {
    assert!(Grid2D::with_default_pml(16, DX).is_ok());
    assert!(Grid2D::with_default_pml(15, DX).is_err());
    let grid = Grid2D::with_default_pml(16, DX).unwrap();
    let med = Medium::homogeneous(16, C_BACKGROUND);
    let (u, _) = gmres_solve(&med, &grid, &SourceTerm::unit(8, 8, OMEGA), &SolverConfig::default()).unwrap();
    assert!(u.norm() > 0.0);
}

#[test]
fn medium_shape_mismatch_is_rejected() {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let med = Medium::homogeneous(16, C_BACKGROUND);
    assert!(matches!(
        HelmholtzOperator::new(&med, &grid, OMEGA),
        Err(WaveError::Shape { .. })
    ));
}
