//! Conditional flow: exact invertibility, log-determinant bookkeeping,
//! likelihood normalization and gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use uflow_core::flow::{CondFlow, FlowConfig};
use uflow_core::linalg::Lu;
use uflow_core::optim::Adam;
use uflow_core::tensor::Tensor;
use uflow_core::unet::UNetConfig;
use uflow_core::TensorError;

fn tiny(latent: [usize; 3], blocks: usize) -> FlowConfig {
    FlowConfig {
        latent,
        blocks,
        hidden: 8,
        cond_size: 16 * latent[1],
        cond_channels: [4, 4, 4, 4],
    }
}

/// Perturb every parameter so no block is the identity, keeping mixing
/// matrices well conditioned.
fn randomize(flow: &mut CondFlow, rng: &mut ChaCha8Rng, amp: f64) {
    for p in &mut flow.params {
        let is_mix = p.name.ends_with(".mix");
        let is_scale = p.name.ends_with(".scale");
        for v in p.value.data_mut() {
            let r: f64 = rng.sample(StandardNormal);
            if is_scale {
                *v = libm::exp(0.3 * r);
            } else if is_mix {
                *v += 0.3 * r;
            } else {
                *v += amp * r;
            }
        }
    }
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let d: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    (d / b.norm_sq()).sqrt()
}

#[test]
fn round_trip_is_exact_in_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut flow = CondFlow::new(tiny([8, 2, 2], 4), &mut rng).unwrap();
    randomize(&mut flow, &mut rng, 0.2);
    let s = Tensor::randn(&[3, 8, 2, 2], &mut rng);
    let y = Tensor::randn(&[3, 1, 32, 32], &mut rng);
    let z = flow.inverse(&s, &y).unwrap().z;
    assert!(rel_err(&flow.forward(&z, &y).unwrap(), &s) < 1e-8);
    let back = flow.inverse(&flow.forward(&s, &y).unwrap(), &y).unwrap().z;
    assert!(rel_err(&back, &s) < 1e-8);
}

#[test]
fn scaled_identity_mixing_contributes_hw_c_log2() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 6;
    let mut flow = CondFlow::identity(tiny([c, 2, 2], 1), &mut rng).unwrap();
    flow.mixing_mut(0).data_mut().iter_mut().for_each(|v| *v *= 2.0);
    let s = Tensor::randn(&[2, c, 2, 2], &mut rng);
    let y = Tensor::randn(&[2, 1, 32, 32], &mut rng);
    let want = 2.0 * 2.0 * c as f64 * libm::log(2.0);
    for l in flow.inverse(&s, &y).unwrap().logdet {
        assert!((l - want).abs() < 1e-12 * want, "{l} vs {want}");
    }
}

#[test]
fn logdet_matches_materialized_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut flow = CondFlow::new(tiny([4, 1, 1], 3), &mut rng).unwrap();
    randomize(&mut flow, &mut rng, 0.5);
    let y = Tensor::randn(&[1, 1, 16, 16], &mut rng);
    let s = Tensor::randn(&[1, 4, 1, 1], &mut rng);
    let logdet = flow.inverse(&s, &y).unwrap().logdet[0];
    // central differences; truncation error O(h²) is far below the tolerance
    let h = 1e-5;
    let mut jac = vec![0.0; 16];
    for j in 0..4 {
        let shifted = |sign: f64| {
            let mut p = s.clone();
            p.data_mut()[j] += sign * h;
            flow.inverse(&p, &y).unwrap().z
        };
        let (zp, zm) = (shifted(1.0), shifted(-1.0));
        for i in 0..4 {
            jac[i * 4 + j] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
        }
    }
    let want = Lu::new(&jac, 4).unwrap().log_abs_det();
    assert!((logdet - want).abs() < 1e-6 * want.abs(), "{logdet} vs {want}");
}

#[test]
fn identity_flow_nll_on_standard_normal_matches_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = tiny([16, 2, 2], 2);
    let d = cfg.dim() as f64;
    let flow = CondFlow::identity(cfg, &mut rng).unwrap();
    let s = Tensor::randn(&[500, 16, 2, 2], &mut rng);
    let y = Tensor::zeros(&[500, 1, 32, 32]);
    let nll = flow.nll(&s, &y).unwrap();
    let want = 0.5 * d * (1.0 + libm::log(2.0 * PI));
    assert!((nll - want).abs() < 0.02 * want, "{nll} vs {want}");
    let zero = flow.nll(&Tensor::zeros(&[2, 16, 2, 2]), &y.batch_item(0)).unwrap_err();
    assert!(matches!(zero, TensorError::ShapeMismatch { .. } | TensorError::Invalid { .. }));
    let at_zero = flow
        .nll(&Tensor::zeros(&[1, 16, 2, 2]), &Tensor::zeros(&[1, 1, 32, 32]))
        .unwrap();
    assert!((at_zero - 0.5 * d * libm::log(2.0 * PI)).abs() < 1e-12);
}

#[test]
fn density_integrates_to_one() {
    // ∫ q(s) ds = E_{s ~ p}[q(s) / p(s)] with a wide Gaussian proposal p
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut flow = CondFlow::new(tiny([2, 1, 1], 3), &mut rng).unwrap();
    randomize(&mut flow, &mut rng, 0.3);
    let sigma = 4.0;
    let n = 20_000;
    let s = Tensor::randn(&[n, 2, 1, 1], &mut rng).scale(sigma);
    let y = Tensor::randn(&[1, 1, 16, 16], &mut rng);
    let ys = Tensor::concat_batch(&vec![y; n]).unwrap();
    let out = flow.inverse(&s, &ys).unwrap();
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            let z = &out.z.data()[2 * i..2 * i + 2];
            let x = &s.data()[2 * i..2 * i + 2];
            let log_q = -0.5 * (z[0] * z[0] + z[1] * z[1]) - libm::log(2.0 * PI) + out.logdet[i];
            let log_p = -0.5 * (x[0] * x[0] + x[1] * x[1]) / (sigma * sigma) - libm::log(2.0 * PI * sigma * sigma);
            libm::exp(log_q - log_p)
        })
        .collect();
    let mean = weights.iter().sum::<f64>() / n as f64;
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - 1.0).abs() < 4.0 * se.max(1e-3), "integral {mean} ± {se}");
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut flow = CondFlow::new(tiny([4, 2, 2], 1), &mut rng).unwrap();
    randomize(&mut flow, &mut rng, 0.3);
    let s = Tensor::randn(&[3, 4, 2, 2], &mut rng);
    let y = Tensor::randn(&[3, 1, 32, 32], &mut rng);
    flow.accumulate_gradients(&s, &y).unwrap();
    let h = 1e-5;
    for p in 0..flow.params.len() {
        let grad = flow.params[p].grad.clone().unwrap();
        let n = grad.len();
        let picks: Vec<usize> = (0..n.min(6)).map(|k| (k * 7919) % n).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for &i in &picks {
            let orig = flow.params[p].value.data()[i];
            flow.params[p].value.data_mut()[i] = orig + h;
            let fp = flow.nll(&s, &y).unwrap();
            flow.params[p].value.data_mut()[i] = orig - h;
            let fm = flow.nll(&s, &y).unwrap();
            flow.params[p].value.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            num += (fd - grad.data()[i]).powi(2);
            den += fd * fd;
        }
        let rel = (num / den.max(1e-20)).sqrt();
        assert!(rel < 1e-4 || den < 1e-16, "{}: rel {rel}", flow.params[p].name);
    }
}

#[test]
fn data_dependent_actnorm_beats_unit_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = tiny([4, 2, 2], 4);
    let s = Tensor::randn(&[32, 4, 2, 2], &mut rng).map(|v| 4.0 * v + 6.0);
    let y = Tensor::randn(&[32, 1, 32, 32], &mut rng);
    let train = |data_init: bool| {
        let mut flow = CondFlow::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        if data_init {
            flow.init_actnorm(&s, &y).unwrap();
        }
        let adam = Adam::with_lr(1e-3);
        for _ in 0..20 {
            flow.train_step(&adam, &s, &y).unwrap();
        }
        flow.nll(&s, &y).unwrap()
    };
    let (with, without) = (train(true), train(false));
    assert!(with < without, "data init {with}, unit init {without}");
}

#[test]
fn conditioning_changes_the_sample_once_trained() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut flow = CondFlow::new(tiny([4, 2, 2], 2), &mut rng).unwrap();
    randomize(&mut flow, &mut rng, 0.3);
    let z = Tensor::randn(&[1, 4, 2, 2], &mut rng);
    let y1 = Tensor::randn(&[1, 1, 32, 32], &mut rng);
    let y2 = Tensor::randn(&[1, 1, 32, 32], &mut rng);
    assert_ne!(flow.forward(&z, &y1).unwrap(), flow.forward(&z, &y2).unwrap());
}

#[test]
fn paper_scale_model_has_five_to_twelve_million_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let flow = CondFlow::identity(FlowConfig::paper(), &mut rng).unwrap();
    let unet = uflow_core::unet::UNet::new(
        UNetConfig::paper(),
        uflow_core::unet::TargetScaling::identity(1540.0),
        &mut rng,
    )
    .unwrap();
    let total = flow.num_params() + unet.num_params();
    assert!((5_000_000..=12_000_000).contains(&total), "total {total}");
    assert_eq!(FlowConfig::paper().latent, UNetConfig::paper().latent_shape());
}
