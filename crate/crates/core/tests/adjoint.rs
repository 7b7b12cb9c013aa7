//! Adjoint-state backprojection: dot-product test, finite-difference
//! gradient check and qualitative imaging behaviour.

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uflow_core::adjoint::{measurement_inner, misfit, Backprojector};
use uflow_core::scene::{build_geometry, rasterize, EllipseSpec, View};
use uflow_core::tensor::Tensor;
use uflow_core::wave::*;

fn small_setup(view: View) -> (Grid2D, uflow_core::scene::SensorGeometry) {
    let grid = Grid2D::with_default_pml(32, DX).unwrap();
    let geo = build_geometry(view, 8, &grid).unwrap();
    (grid, geo)
}

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, n], |_| rng.sample::<f64, _>(StandardNormal))
}

fn blob(center: (f64, f64), radius: f64, contrast: f64) -> EllipseSpec {
    EllipseSpec {
        center,
        semi_axes: (radius, radius),
        rotation: 0.0,
        speed_contrast: contrast,
    }
}

#[test]
fn dot_product_test() {
    let (grid, geo) = small_setup(View::Full);
    // linearize at a heterogeneous medium so the test is not special to the background
    let medium = rasterize(&[blob((0.003, 0.0), 0.003, 1.3)], &grid, C_BACKGROUND);
    let bp = Backprojector::new(&medium, &grid, &geo, OMEGA, &SolverConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3 {
        let dc = random_image(grid.n, &mut rng);
        let values = (0..64)
            .map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        let dy = MeasurementMatrix::new(8, 8, values).unwrap();
        let lhs = measurement_inner(&bp.jacobian_apply(&dc).unwrap(), &dy);
        let adj = bp.jacobian_adjoint(&dy).unwrap();
        let rhs = dc.dot(&adj);
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs());
        assert!(rel < 1e-8, "lhs {lhs} rhs {rhs} rel {rel}");
    }
}

#[test]
fn backprojection_matches_misfit_directional_derivative() {
    let (grid, geo) = small_setup(View::Full);
    let cfg = SolverConfig::default().with_tol(1e-12);
    let truth = rasterize(&[blob((-0.002, 0.003), 0.003, 1.2)], &grid, C_BACKGROUND);
    let y_obs = simulate_measurements(&truth, &grid, &geo, OMEGA, &cfg).unwrap();
    let bp = Backprojector::background(&grid, &geo, OMEGA, C_BACKGROUND, &cfg).unwrap();
    let image = bp.backproject(&y_obs).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dir = random_image(grid.n, &mut rng);
    let h = 1e-6 * C_BACKGROUND;
    let f = |sign: f64| {
        let c = Tensor::from_fn(&[grid.n, grid.n], |i| C_BACKGROUND + sign * h * dir.data()[i]);
        let med = Medium::new(c, C_BACKGROUND).unwrap();
        misfit(&y_obs, &simulate_measurements(&med, &grid, &geo, OMEGA, &cfg).unwrap()).unwrap()
    };
    let fd = (f(1.0) - f(-1.0)) / (2.0 * h);
    let analytic = image.dot(&dir);
    let rel = (fd - analytic).abs() / analytic.abs();
    assert!(rel < 1e-4, "fd {fd} analytic {analytic} rel {rel}");
}

#[test]
fn backprojection_peaks_near_a_small_scatterer() {
    let grid = Grid2D::desk();
    let geo = build_geometry(View::Full, 16, &grid).unwrap();
    let cfg = SolverConfig::default();
    let lam = grid.wavelength(OMEGA, C_BACKGROUND);
    let center = (0.008, -0.006);
    let truth = rasterize(&[blob(center, 0.4 * lam, 1.1)], &grid, C_BACKGROUND);
    let y_obs = simulate_measurements(&truth, &grid, &geo, OMEGA, &cfg).unwrap();
    let bp = Backprojector::background(&grid, &geo, OMEGA, C_BACKGROUND, &cfg).unwrap();
    let image = bp.backproject(&y_obs).unwrap();
    let (imax, _) = image
        .data()
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
    let (ix, iy) = (imax % grid.n, imax / grid.n);
    let dist = libm::hypot(grid.coord(ix) - center.0, grid.coord(iy) - center.1);
    assert!(dist < 2.0 * lam, "peak {dist} m from the scatterer (λ = {lam})");
}

#[test]
fn limited_view_backprojection_is_weaker_on_the_left() {
    let grid = Grid2D::desk();
    let geo = build_geometry(View::Limited, 16, &grid).unwrap();
    let cfg = SolverConfig::default();
    let lam = grid.wavelength(OMEGA, C_BACKGROUND);
    let truth = rasterize(&[blob((0.0, 0.0), 0.75 * lam, 1.5)], &grid, C_BACKGROUND);
    let y_obs = simulate_measurements(&truth, &grid, &geo, OMEGA, &cfg).unwrap();
    let bp = Backprojector::background(&grid, &geo, OMEGA, C_BACKGROUND, &cfg).unwrap();
    let image = bp.backproject(&y_obs).unwrap();
    let n = grid.n;
    let (mut left, mut right) = (0.0, 0.0);
    for iy in 0..n {
        for ix in 0..n {
            let v = image.data()[iy * n + ix].abs();
            if ix < n / 2 {
                left += v;
            } else {
                right += v;
            }
        }
    }
    assert!(left < right, "left {left} right {right}");
}

#[test]
fn misfit_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let mk = |rng: &mut ChaCha8Rng| {
            let v = (0..9).map(|_| C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
            MeasurementMatrix::new(3, 3, v).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        assert!(misfit(&a, &b).unwrap() >= 0.0);
    }
}
