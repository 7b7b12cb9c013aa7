//! Banded LU factorization (no pivoting) for the five-point Helmholtz matrix.
//!
//! The natural row-major ordering of an `m x m` grid gives a matrix with
//! lower and upper bandwidth `m`. Fill-in stays inside that band, so the
//! factors are stored in `(2m + 1)`-wide rows.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64 as C64;

use crate::wave::WaveError;

#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    /// Row `i`, column `j` lives at `i * (2 bw + 1) + (j + bw - i)`.
    band: Vec<C64>,
}

impl BandedLu {
    /// Factor a matrix given by `entry(i, j)` for `|i - j| <= bw`.
    pub fn factor(
        n: usize,
        bw: usize,
        mut entry: impl FnMut(usize, usize) -> C64,
    ) -> Result<Self, WaveError> {
        let width = 2 * bw + 1;
        let mut band = vec![C64::new(0.0, 0.0); n * width];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let hi = (i + bw).min(n - 1);
            for j in lo..=hi {
                band[i * width + j + bw - i] = entry(i, j);
            }
        }
        let scale = band.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        for k in 0..n {
            let pivot = band[k * width + bw];
            if !(pivot.norm() > 1e-14 * scale) {
                return Err(WaveError::Factorization { row: k });
            }
            let inv_pivot = pivot.inv();
            let hi = (k + bw).min(n - 1);
            let (head, tail) = band.split_at_mut((k + 1) * width);
            let urow = &head[k * width + bw + 1..k * width + bw + 1 + (hi - k)];
            for i in k + 1..=hi {
                let row = &mut tail[(i - k - 1) * width..(i - k) * width];
                // column k in row i sits at offset k + bw - i
                let lk = k + bw - i;
                let l = row[lk];
                if l == C64::new(0.0, 0.0) {
                    continue;
                }
                let l = l * inv_pivot;
                row[lk] = l;
                let dst = &mut row[lk + 1..lk + 1 + (hi - k)];
                for (d, u) in dst.iter_mut().zip(urow) {
                    *d -= l * u;
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, x: &mut [C64]) {
        let (n, bw) = (self.n, self.bw);
        let width = 2 * bw + 1;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &self.band[i * width..];
            let mut s = x[i];
            for j in lo..i {
                s -= row[j + bw - i] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let row = &self.band[i * width..];
            let mut s = x[i];
            for j in i + 1..=hi {
                s -= row[j + bw - i] * x[j];
            }
            x[i] = s / row[bw];
        }
    }
}
