//! Small dense real linear algebra for the flow's channel-mixing matrices.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};

/// LU factorization with partial pivoting of a row-major `n x n` matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &[f64], n: usize) -> Result<Self> {
        if a.len() != n * n {
            return Err(TensorError::ShapeMismatch {
                op: "lu",
                lhs: vec![n, n],
                rhs: vec![a.len()],
            });
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax == 0.0 {
                return Err(TensorError::Singular { det_abs: 0.0 });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    /// `log|det A|`.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| libm::log(self.lu[i * self.n + i].abs()))
            .sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[i * n + j] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[i * n + i];
        }
        x
    }

    /// Solve `A X = B` for a row-major `n x m` right-hand side, in place.
    pub fn solve_many(&self, b: &mut [f64], m: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * m, "right-hand side must be n x m");
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        // row-oriented substitutions: every update is a contiguous axpy
        for i in 0..n {
            let (done, rest) = x.split_at_mut(i * m);
            let row = &mut rest[..m];
            for j in 0..i {
                let l = self.lu[i * n + j];
                if l != 0.0 {
                    row.iter_mut().zip(&done[j * m..(j + 1) * m]).for_each(|(r, v)| *r -= l * v);
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = x.split_at_mut((i + 1) * m);
            let row = &mut head[i * m..];
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                if u != 0.0 {
                    row.iter_mut().zip(&tail[(j - i - 1) * m..(j - i) * m]).for_each(|(r, v)| *r -= u * v);
                }
            }
            let d = 1.0 / self.lu[i * n + i];
            row.iter_mut().for_each(|r| *r *= d);
        }
        b.copy_from_slice(&x);
    }

    /// Row-major inverse.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        self.solve_many(&mut inv, n);
        inv
    }
}
