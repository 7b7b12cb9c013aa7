//! Restarted, right-preconditioned GMRES for complex linear systems.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;

use crate::wave::WaveError;

pub trait LinearOperator {
    fn dim(&self) -> usize;
    /// `y = A x`
    fn apply(&self, x: &[C64], y: &mut [C64]);
}

pub trait Preconditioner {
    /// `y = M^{-1} x`
    fn apply_inv(&self, x: &[C64], y: &mut [C64]);
}

pub struct Identity;

impl Preconditioner for Identity {
    fn apply_inv(&self, x: &[C64], y: &mut [C64]) {
        y.copy_from_slice(x);
    }
}

impl Preconditioner for crate::banded::BandedLu {
    fn apply_inv(&self, x: &[C64], y: &mut [C64]) {
        y.copy_from_slice(x);
        self.solve_in_place(y);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresConfig {
    /// Relative residual target `||b - A x|| / ||b||`.
    pub tol: f64,
    /// Krylov dimension per cycle.
    pub restart: usize,
    /// Maximum number of restart cycles.
    pub max_restarts: usize,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            restart: 50,
            max_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn norm(v: &[C64]) -> f64 {
    libm::sqrt(v.iter().map(|z| z.norm_sqr()).sum())
}

/// `<a, b> = sum conj(a) b`
fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn residual(op: &dyn LinearOperator, b: &[C64], x: &[C64], r: &mut [C64]) {
    op.apply(x, r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
}

/// Solve `A x = b` starting from the contents of `x`.
///
/// Convergence is judged on the true (unpreconditioned) residual, which
/// right preconditioning keeps equal to the Arnoldi residual estimate.
pub fn gmres(
    op: &dyn LinearOperator,
    precond: &dyn Preconditioner,
    b: &[C64],
    x: &mut [C64],
    cfg: &GmresConfig,
) -> Result<GmresStats, WaveError> {
    let n = op.dim();
    if b.len() != n || x.len() != n {
        return Err(WaveError::Shape {
            what: "gmres rhs/solution",
            expected: n,
            got: b.len().min(x.len()),
        });
    }
    if !(cfg.tol > 0.0) || cfg.restart == 0 {
        return Err(WaveError::InvalidConfig("gmres needs tol > 0 and restart > 0"));
    }
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        return Ok(GmresStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m = cfg.restart;
    let zero = C64::new(0.0, 0.0);
    let mut r = vec![zero; n];
    let mut w = vec![zero; n];
    let mut z = vec![zero; n];
    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
    let mut h = vec![zero; (m + 1) * m];
    let mut cs = vec![0.0f64; m];
    let mut sn = vec![zero; m];
    let mut g = vec![zero; m + 1];
    let mut iterations = 0;

    residual(op, b, x, &mut r);
    let mut rel = norm(&r) / bnorm;
    for _cycle in 0..=cfg.max_restarts {
        if rel <= cfg.tol {
            return Ok(GmresStats {
                iterations,
                relative_residual: rel,
            });
        }
        let beta = norm(&r);
        basis.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = zero);
        g[0] = C64::new(beta, 0.0);
        h.iter_mut().for_each(|v| *v = zero);
        let mut k_used = 0;
        for j in 0..m {
            precond.apply_inv(&basis[j], &mut z);
            op.apply(&z, &mut w);
            iterations += 1;
            for (i, v) in basis.iter().enumerate() {
                let hij = dotc(v, &w);
                h[i * m + j] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let hnext = norm(&w);
            h[(j + 1) * m + j] = C64::new(hnext, 0.0);
            for i in 0..j {
                let (a, bb) = (h[i * m + j], h[(i + 1) * m + j]);
                h[i * m + j] = cs[i] * a + sn[i] * bb;
                h[(i + 1) * m + j] = -sn[i].conj() * a + cs[i] * bb;
            }
            let (a, bb) = (h[j * m + j], h[(j + 1) * m + j]);
            let denom = libm::sqrt(a.norm_sqr() + bb.norm_sqr());
            if denom == 0.0 {
                k_used = j;
                break;
            }
            // Rotation zeroing bb: [c s; -conj(s) c] with real c.
            let (c, s) = if a.norm() == 0.0 {
                (0.0, C64::new(1.0, 0.0))
            } else {
                let c = a.norm() / denom;
                let s = (a / a.norm()) * bb.conj() / denom;
                (c, s)
            };
            cs[j] = c;
            sn[j] = s;
            h[j * m + j] = c * a + s * bb;
            h[(j + 1) * m + j] = zero;
            g[j + 1] = -s.conj() * g[j];
            g[j] = c * g[j];
            k_used = j + 1;
            let est = g[j + 1].norm() / bnorm;
            if est <= cfg.tol || hnext == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        // back substitution for the k_used Krylov coefficients
        let k = k_used;
        let mut yv = vec![zero; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for l in i + 1..k {
                s -= h[i * m + l] * yv[l];
            }
            yv[i] = s / h[i * m + i];
        }
        w.iter_mut().for_each(|v| *v = zero);
        for (coef, v) in yv.iter().zip(&basis) {
            for (wk, vk) in w.iter_mut().zip(v) {
                *wk += coef * vk;
            }
        }
        precond.apply_inv(&w, &mut z);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }
        residual(op, b, x, &mut r);
        rel = norm(&r) / bnorm;
    }
    if rel <= cfg.tol {
        Ok(GmresStats {
            iterations,
            relative_residual: rel,
        })
    } else {
        Err(WaveError::NotConverged {
            relative_residual: rel,
            iterations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dense {
        n: usize,
        a: Vec<C64>,
    }

    impl LinearOperator for Dense {
        fn dim(&self) -> usize {
            self.n
        }
        fn apply(&self, x: &[C64], y: &mut [C64]) {
            for i in 0..self.n {
                y[i] = (0..self.n).map(|j| self.a[i * self.n + j] * x[j]).sum();
            }
        }
    }

    fn test_matrix(n: usize) -> Dense {
        let a = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i == j {
                    C64::new(3.0 + i as f64 * 0.1, 1.0)
                } else {
                    C64::new(libm::sin((i * 7 + j * 3) as f64) * 0.3, libm::cos((i + 2 * j) as f64) * 0.2)
                }
            })
            .collect();
        Dense { n, a }
    }

    #[test]
    fn converges_with_restarts() {
        let op = test_matrix(30);
        let x_true: Vec<C64> = (0..30).map(|i| C64::new(i as f64, -1.0)).collect();
        let mut b = vec![C64::new(0.0, 0.0); 30];
        op.apply(&x_true, &mut b);
        let mut x = vec![C64::new(0.0, 0.0); 30];
        let cfg = GmresConfig {
            tol: 1e-12,
            restart: 5,
            max_restarts: 200,
        };
        let stats = gmres(&op, &Identity, &b, &mut x, &cfg).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        for (a, e) in x.iter().zip(&x_true) {
            assert!((a - e).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = test_matrix(4);
        let mut x = vec![C64::new(1.0, 1.0); 4];
        let stats = gmres(&op, &Identity, &[C64::new(0.0, 0.0); 4], &mut x, &GmresConfig::default()).unwrap();
        assert_eq!(stats.iterations, 0);
        assert!(x.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn non_convergence_reports_residual() {
        let op = test_matrix(40);
        let b = vec![C64::new(1.0, 0.0); 40];
        let mut x = vec![C64::new(0.0, 0.0); 40];
        let cfg = GmresConfig {
            tol: 1e-14,
            restart: 2,
            max_restarts: 1,
        };
        match gmres(&op, &Identity, &b, &mut x, &cfg) {
            Err(WaveError::NotConverged { relative_residual, .. }) => assert!(relative_residual > 1e-14),
            other => panic!("unexpected {other:?}"),
        }
    }
}
