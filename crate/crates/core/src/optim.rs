//! Trainable parameters and the Adam optimizer.

use alloc::string::String;

use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Learning rate used for both networks unless overridden.
pub const DEFAULT_LR: f64 = 1e-4;

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            grad: None,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Add `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &Tensor) -> Result<()> {
        self.value.check_same("accumulate_grad", g)?;
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grad = Some(g.clone());
                Ok(())
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Put every parameter on `tape`, as leaves when `trainable`, otherwise as
/// constants.
pub fn bind(params: &[Parameter], tape: &mut Tape, trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            }
        })
        .collect()
}

/// Move the gradients of `vars` into the matching parameters. Parameters
/// the loss does not depend on receive a zero gradient.
pub fn collect_grads(params: &mut [Parameter], vars: &[Var], grads: &mut Gradients) -> Result<()> {
    for (p, v) in params.iter_mut().zip(vars) {
        let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        if !g.is_finite() {
            return Err(TensorError::NonFinite(alloc::format!("gradient of {}", p.name)));
        }
        p.accumulate_grad(&g)?;
    }
    Ok(())
}

/// Total number of scalars in `params`.
pub fn count(params: &[Parameter]) -> usize {
    params.iter().map(Parameter::numel).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One bias-corrected Adam update over `params`; clears their gradients.
    ///
    /// Every parameter must carry a gradient; the check runs before any
    /// parameter is touched.
    pub fn step<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(i));
        }
        for p in params.iter_mut() {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
            let (b1, b2) = (self.beta1, self.beta2);
            let (lr, eps) = (self.lr, self.eps);
            let (inv_bc1, inv_bc2) = (1.0 / bc1, 1.0 / bc2);
            let Parameter { value, m, v, .. } = &mut **p;
            for (((x, mi), vi), gi) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi * inv_bc1) / (libm::sqrt(*vi * inv_bc2) + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = Parameter::new("w", Tensor::from_fn(&[4], |i| i as f64));
        p.accumulate_grad(&Tensor::zeros(&[4])).unwrap();
        Adam::default().step([&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.7, -0.02, 1e3] {
            let mut p = Parameter::new("w", Tensor::scalar(1.0));
            p.accumulate_grad(&Tensor::scalar(g)).unwrap();
            let adam = Adam::default();
            adam.step([&mut p]).unwrap();
            // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
            let expect = 1.0 - adam.lr * g / (g.abs() + adam.eps);
            assert!((p.value.item() - expect).abs() < 1e-15);
            assert!(((1.0 - p.value.item()).abs() - adam.lr).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut a = Parameter::new("a", Tensor::scalar(1.0));
        let mut b = Parameter::new("b", Tensor::scalar(1.0));
        a.accumulate_grad(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            Adam::default().step([&mut a, &mut b]),
            Err(TensorError::MissingGrad(1))
        );
        assert_eq!(a.value.item(), 1.0);
    }

    #[test]
    fn default_lr_is_1e_minus_4() {
        assert_eq!(Adam::default().lr, 1e-4);
    }
}
