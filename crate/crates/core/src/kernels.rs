//! Forward and backward kernels for the tape primitives.
//!
//! All image tensors are `[N, C, H, W]`, row-major.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `c = op(a) * op(b) + beta * c` with row-major storage.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let sa = if trans_a { Strides(1, m) } else { Strides(k, 1) };
    let sb = if trans_b { Strides(1, k) } else { Strides(n, 1) };
    gemm_strided(m, k, n, a, sa, b, sb, beta, c, Strides(n, 1));
}

/// Row and column strides of a matrix view.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides(pub usize, pub usize);

impl Strides {
    /// One past the largest element offset of an `r x c` view.
    fn extent(self, r: usize, c: usize) -> usize {
        if r == 0 || c == 0 {
            0
        } else {
            (r - 1) * self.0 + (c - 1) * self.1 + 1
        }
    }
}

/// General strided `c = a * b + beta * c` (`m x k` times `k x n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    assert!(sa.extent(m, k) <= a.len() && sb.extent(k, n) <= b.len() && sc.extent(m, n) <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * sc.0 + j * sc.1] *= beta;
            }
        }
        return;
    }
    // SAFETY: the assertion above guarantees every element addressed through
    // the given (m, k, n) extents and strides lies inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, c_in, h, w) = x.dims4()?;
        let (c_out, kc, kh, kw) = k.dims4()?;
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: alloc::format!("kernel spatial size {kh}x{kw} must be odd"),
            });
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn k_dim(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Small feature maps are processed as one batch-wide GEMM.
    fn batched(&self) -> bool {
        self.ho * self.wo <= 32
    }

    /// Output rows per chunk so that one column block stays cache-resident.
    fn rows_per_chunk(&self) -> usize {
        const TARGET_BYTES: usize = 256 * 1024;
        let per_row = self.k_dim() * self.wo * core::mem::size_of::<f64>();
        (TARGET_BYTES / per_row.max(1)).clamp(1, self.ho)
    }
}

/// Column block of sample `b` for output rows `oy0..oy1`, laid out as
/// `[k_dim, (oy1 - oy0) * wo]` with row stride `ld`.
fn im2col_chunk(x: &[f64], g: &ConvGeom, b: usize, (oy0, oy1): (usize, usize), cols: &mut [f64], ld: usize) {
    let ncols = (oy1 - oy0) * g.wo;
    for row in 0..g.k_dim() {
        cols[row * ld..row * ld + ncols].iter_mut().for_each(|v| *v = 0.0);
    }
    for ci in 0..g.c_in {
        let src = &x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ld..row * ld + ncols];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..][..g.w];
                    let dst_row = &mut dst[(oy - oy0) * g.wo..][..g.wo];
                    if g.stride == 1 {
                        // valid output range where 0 <= ox + kx - pad < w
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (g.w + g.pad - kx).min(g.wo);
                        if lo < hi {
                            let off = lo + kx - g.pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[off..off + hi - lo]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column block back into the image gradient of sample `b`.
fn col2im_chunk(cols: &[f64], g: &ConvGeom, b: usize, (oy0, oy1): (usize, usize), dx: &mut [f64], ld: usize) {
    let ncols = (oy1 - oy0) * g.wo;
    for ci in 0..g.c_in {
        let dst = &mut dx[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ld..row * ld + ncols];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                    let src_row = &src[(oy - oy0) * g.wo..][..g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx);
                        let hi = (g.w + g.pad - kx).min(g.wo);
                        if lo < hi {
                            let off = lo + kx - g.pad;
                            for (d, s) in dst_row[off..off + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Visit `(sample, oy0, oy1)` blocks of output rows.
fn for_each_chunk(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let step = g.rows_per_chunk();
    for b in 0..g.n {
        let mut oy0 = 0;
        while oy0 < g.ho {
            let oy1 = (oy0 + step).min(g.ho);
            f(b, oy0, oy1);
            oy0 = oy1;
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, k, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: k.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }
    let hw_o = g.ho * g.wo;
    let kd = g.k_dim();
    let mut out = vec![0.0; g.n * g.c_out * hw_o];
    if g.batched() {
        // one GEMM over the whole batch, then reorder [Cout, N, hw] -> [N, Cout, hw]
        let nc = g.n * hw_o;
        let mut cols = vec![0.0; kd * nc];
        for b in 0..g.n {
            im2col_chunk(x.data(), &g, b, (0, g.ho), &mut cols[b * hw_o..], nc);
        }
        let mut ymat = vec![0.0; g.c_out * nc];
        gemm(g.c_out, kd, nc, k.data(), false, &cols, false, 0.0, &mut ymat);
        for co in 0..g.c_out {
            for b in 0..g.n {
                out[(b * g.c_out + co) * hw_o..][..hw_o].copy_from_slice(&ymat[co * nc + b * hw_o..][..hw_o]);
            }
        }
    } else {
        let mut cols = vec![0.0; kd * g.rows_per_chunk() * g.wo];
        for_each_chunk(&g, |b, oy0, oy1| {
            let nc = (oy1 - oy0) * g.wo;
            im2col_chunk(x.data(), &g, b, (oy0, oy1), &mut cols, nc);
            let c = &mut out[b * g.c_out * hw_o + oy0 * g.wo..];
            gemm_strided(nc, kd, g.c_out, &cols, Strides(1, nc), k.data(), Strides(1, kd), 0.0, c, Strides(1, hw_o));
        });
    }
    if let Some(bv) = bias {
        for (plane, chunk) in out.chunks_mut(hw_o).enumerate() {
            let v = bv.data()[plane % g.c_out];
            chunk.iter_mut().for_each(|o| *o += v);
        }
    }
    Tensor::new(&[g.n, g.c_out, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dk: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x, k, stride, pad)?;
    let hw_o = g.ho * g.wo;
    let kd = g.k_dim();
    if dy.shape() != [g.n, g.c_out, g.ho, g.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d backward",
            lhs: dy.shape().to_vec(),
            rhs: alloc::vec![g.n, g.c_out, g.ho, g.wo],
        });
    }
    let mut dk = need.1.then(|| vec![0.0; g.c_out * kd]);
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    if (need.0 || need.1) && g.batched() {
        let nc = g.n * hw_o;
        let mut dymat = vec![0.0; g.c_out * nc];
        for co in 0..g.c_out {
            for b in 0..g.n {
                dymat[co * nc + b * hw_o..][..hw_o].copy_from_slice(&dy.data()[(b * g.c_out + co) * hw_o..][..hw_o]);
            }
        }
        if let Some(dk) = dk.as_mut() {
            let mut cols = vec![0.0; kd * nc];
            for b in 0..g.n {
                im2col_chunk(x.data(), &g, b, (0, g.ho), &mut cols[b * hw_o..], nc);
            }
            gemm(g.c_out, nc, kd, &dymat, false, &cols, true, 0.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![0.0; kd * nc];
            gemm(kd, g.c_out, nc, k.data(), true, &dymat, false, 0.0, &mut dcols);
            for b in 0..g.n {
                col2im_chunk(&dcols[b * hw_o..], &g, b, (0, g.ho), dx, nc);
            }
        }
    } else if need.0 || need.1 {
        let cap = kd * g.rows_per_chunk() * g.wo;
        let mut cols = vec![0.0; cap];
        let mut dcols = vec![0.0; if need.0 { cap } else { 0 }];
        for_each_chunk(&g, |b, oy0, oy1| {
            let nc = (oy1 - oy0) * g.wo;
            let dyc = &dy.data()[b * g.c_out * hw_o + oy0 * g.wo..];
            if let Some(dk) = dk.as_mut() {
                im2col_chunk(x.data(), &g, b, (oy0, oy1), &mut cols, nc);
                // dk += dy_chunk * cols^T
                gemm_strided(g.c_out, nc, kd, dyc, Strides(hw_o, 1), &cols, Strides(1, nc), 1.0, dk, Strides(kd, 1));
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = k^T * dy_chunk
                gemm_strided(nc, g.c_out, kd, dyc, Strides(1, hw_o), k.data(), Strides(kd, 1), 0.0, &mut dcols, Strides(1, nc));
                col2im_chunk(&dcols, &g, b, (oy0, oy1), dx, nc);
            }
        });
    }
    let db = need.2.then(|| {
        let mut db = vec![0.0; g.c_out];
        for (plane, chunk) in dy.data().chunks(hw_o).enumerate() {
            db[plane % g.c_out] += chunk.iter().sum::<f64>();
        }
        Tensor::new(&[g.c_out], db)
    });
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dk: dk.map(|d| Tensor::new(k.shape(), d)).transpose()?,
        db: db.transpose()?,
    })
}

pub(crate) fn pool_down(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Indivisible {
            op: "pool_down",
            h,
            w,
            factor: 2,
        });
    }
    let (h2, w2) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let s = &src[plane * h * w..][..h * w];
        let d = &mut out[plane * h2 * w2..][..h2 * w2];
        for oy in 0..h2 {
            for ox in 0..w2 {
                let i = 2 * oy * w + 2 * ox;
                d[oy * w2 + ox] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub(crate) fn pool_down_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = dy.dims4()?;
    let (h, w) = (2 * h2, 2 * w2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let s = &dy.data()[plane * h2 * w2..][..h2 * w2];
        let d = &mut dx[plane * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = 0.25 * s[(y / 2) * w2 + x / 2];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

pub(crate) fn upsample(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for plane in 0..n * c {
        let s = &x.data()[plane * h * w..][..h * w];
        let d = &mut out[plane * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub(crate) fn upsample_backward(dy: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = dy.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let s = &dy.data()[plane * h2 * w2..][..h2 * w2];
        let d = &mut dx[plane * h * w..][..h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                d[(y / 2) * w + x / 2] += s[y * w2 + x];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

/// Concatenate rank-4 tensors along the channel axis.
pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let (n, _, h, w) = parts[0].dims4()?;
    let mut c_total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        c_total += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c_total * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Tensor::new(&[n, c_total, h, w], out)
}

pub(crate) fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if start + len > c {
        return Err(TensorError::Invalid {
            op: "slice_channels",
            msg: alloc::format!("channels {start}..{} out of {c}", start + len),
        });
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    Tensor::new(&[n, len, h, w], out)
}

/// `y[n, c, ..] = scale[c] * (x[n, c, ..] + bias[c])`.
pub(crate) fn channel_affine(x: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || bias.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "channel_affine",
            lhs: x.shape().to_vec(),
            rhs: scale.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let (s, bb) = (scale.data()[ch], bias.data()[ch]);
            for v in &mut out[(b * c + ch) * hw..][..hw] {
                *v = s * (*v + bb);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);
        // a^T (3x2) stored as 2x3 -> (3x2)*(2x3)
        let mut c2 = [0.0; 9];
        gemm(3, 2, 3, &a, true, &a, false, 0.0, &mut c2);
        assert_eq!(c2[0], 1.0 + 16.0);
        assert_eq!(c2[4], 4.0 + 25.0);
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let x = Tensor::ones(&[1, 1, 8, 8]);
        let k = Tensor::ones(&[2, 1, 3, 3]);
        let y = conv2d_forward(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert_eq!(y.data()[5], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&x, &k, None, 1, 0).is_err());
    }
}
