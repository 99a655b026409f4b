//! Raw loops behind the tape primitives. All buffers are row-major.

use crate::tensor::Real;

/// Geometry of a square-kernel 2-D convolution over `[B, C, H, W]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        (padded >= k).then(|| (padded - k) / stride + 1)
    }

    /// Columns `c` in `[lo, hi)` whose tap `c*stride + kw - pad` lands in `[0, w)`.
    #[inline]
    fn col_range(&self, kw: usize) -> (usize, usize) {
        let lo = if self.pad > kw {
            (self.pad - kw).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kw {
            ((self.w - 1 + self.pad - kw) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, r: usize, kh: usize) -> Option<usize> {
        let ih = (r * self.stride + kh) as isize - self.pad as isize;
        (ih >= 0 && (ih as usize) < self.h).then_some(ih as usize)
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1 stride-1 unpadded kernels read their input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold one image `[cin, h, w]` into `[cin·k·k, oh·ow]`.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (k, ow, s, pad) = (self.k, self.ow, self.stride, self.pad);
        let p = self.out_plane();
        for i in 0..self.cin {
            let plane = &x[i * self.h * self.w..(i + 1) * self.h * self.w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = &mut cols[((i * k + kh) * k + kw) * p..][..p];
                    let (lo, hi) = self.col_range(kw);
                    for (r, dst) in row.chunks_exact_mut(ow).enumerate() {
                        let Some(ih) = self.in_row(r, kh) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        let src = &plane[ih * self.w..(ih + 1) * self.w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[lo + kw - pad..hi + kw - pad]);
                        } else {
                            for (c, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[(c + lo) * s + kw - pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: fold columns back, accumulating.
    fn col2im_acc<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (k, ow, s, pad) = (self.k, self.ow, self.stride, self.pad);
        let p = self.out_plane();
        for i in 0..self.cin {
            let plane = &mut x[i * self.h * self.w..(i + 1) * self.h * self.w];
            for kh in 0..k {
                for kw in 0..k {
                    let row = &cols[((i * k + kh) * k + kw) * p..][..p];
                    let (lo, hi) = self.col_range(kw);
                    for (r, src) in row.chunks_exact(ow).enumerate() {
                        let Some(ih) = self.in_row(r, kh) else { continue };
                        let dst = &mut plane[ih * self.w..(ih + 1) * self.w];
                        if s == 1 {
                            for (d, &v) in dst[lo + kw - pad..hi + kw - pad].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (c, &v) in src[lo..hi].iter().enumerate() {
                                dst[(c + lo) * s + kw - pad] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) · op(b) + beta·c` with `c: [m, n]` row-major. `a` is stored as
/// `[m, k]`, or `[k, m]` when `ta`; likewise `b` as `[k, n]` or `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || (k == 0 && beta == T::one()) {
        return;
    }
    let (m_, k_, n_) = (m as isize, k as isize, n as isize);
    let sa = if ta { (1, m_) } else { (k_, 1) };
    let sb = if tb { (1, k_) } else { (n_, 1) };
    // SAFETY: lengths checked above; `c` is a unique borrow.
    unsafe { T::gemm(m, k, n, a.as_ptr(), sa, b.as_ptr(), sb, beta, c.as_mut_ptr(), (n_, 1)) }
}

/// `out += conv(x, w)`; weight layout `[cout, cin, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], out: &mut [T]) {
    let (kk, p, inp) = (g.patch_len(), g.out_plane(), g.cin * g.h * g.w);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    for b in 0..g.batch {
        let xb = &x[b * inp..(b + 1) * inp];
        let ob = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        if g.is_pointwise() {
            gemm(g.cout, kk, p, wt, false, xb, false, T::one(), ob);
        } else {
            g.im2col(xb, &mut cols);
            gemm(g.cout, kk, p, wt, false, &cols, false, T::one(), ob);
        }
    }
}

/// `gx += conv(·, w)ᵀ gy`, the adjoint of [`conv2d_forward`] in its input.
pub(crate) fn conv2d_backward_input<T: Real>(g: &ConvGeom, gy: &[T], wt: &[T], gx: &mut [T]) {
    let (kk, p, inp) = (g.patch_len(), g.out_plane(), g.cin * g.h * g.w);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    for b in 0..g.batch {
        let gyb = &gy[b * g.cout * p..(b + 1) * g.cout * p];
        let gxb = &mut gx[b * inp..(b + 1) * inp];
        if g.is_pointwise() {
            gemm(kk, g.cout, p, wt, true, gyb, false, T::one(), gxb);
        } else {
            gemm(kk, g.cout, p, wt, true, gyb, false, T::zero(), &mut cols);
            g.col2im_acc(&cols, gxb);
        }
    }
}

/// `gw += ∂⟨gy, conv(x, w)⟩/∂w`.
pub(crate) fn conv2d_backward_weight<T: Real>(g: &ConvGeom, gy: &[T], x: &[T], gw: &mut [T]) {
    let (kk, p, inp) = (g.patch_len(), g.out_plane(), g.cin * g.h * g.w);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    for b in 0..g.batch {
        let xb = &x[b * inp..(b + 1) * inp];
        let gyb = &gy[b * g.cout * p..(b + 1) * g.cout * p];
        if g.is_pointwise() {
            gemm(g.cout, p, kk, gyb, false, xb, true, T::one(), gw);
        } else {
            g.im2col(xb, &mut cols);
            gemm(g.cout, p, kk, gyb, false, &cols, true, T::one(), gw);
        }
    }
}

/// `c[b] += a[b] · bm[b]` for `a: [bt, m, k]`, `bm: [bt, k, n]`.
pub(crate) fn matmul_acc<T: Real>(a: &[T], bm: &[T], c: &mut [T], bt: usize, m: usize, k: usize, n: usize) {
    for b in 0..bt {
        gemm(m, k, n, &a[b * m * k..], false, &bm[b * k * n..], false, T::one(), &mut c[b * m * n..]);
    }
}

/// `ga += gc · bmᵀ`.
pub(crate) fn matmul_grad_lhs<T: Real>(gc: &[T], bm: &[T], ga: &mut [T], bt: usize, m: usize, k: usize, n: usize) {
    for b in 0..bt {
        gemm(m, n, k, &gc[b * m * n..], false, &bm[b * k * n..], true, T::one(), &mut ga[b * m * k..]);
    }
}

/// `gb += aᵀ · gc`.
pub(crate) fn matmul_grad_rhs<T: Real>(gc: &[T], a: &[T], gb: &mut [T], bt: usize, m: usize, k: usize, n: usize) {
    for b in 0..bt {
        gemm(k, m, n, &a[b * m * k..], true, &gc[b * m * n..], false, T::one(), &mut gb[b * k * n..]);
    }
}

/// Swap the two trailing axes of `[bt, r, c]`.
pub(crate) fn transpose_last2<T: Real>(x: &[T], bt: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..bt {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

/// Per-group statistics for group normalization over `[B, C, S]`.
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: T,
    out: &mut [T],
) -> GroupStats<T> {
    let cpg = channels / groups;
    let len = cpg * spatial;
    let inv_len = T::one() / T::from_f64(len as f64);
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for b in 0..batch {
        for g in 0..groups {
            let start = (b * channels + g * cpg) * spatial;
            let xs = &x[start..start + len];
            let mu = xs.iter().copied().sum::<T>() * inv_len;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_len;
            let rs = T::one() / (var + eps).sqrt();
            for ci in 0..cpg {
                let c = g * cpg + ci;
                let off = start + ci * spatial;
                let (ga, be) = (gamma[c], beta[c]);
                for (o, &v) in out[off..off + spatial].iter_mut().zip(&x[off..off + spatial]) {
                    *o = (v - mu) * rs * ga + be;
                }
            }
            mean.push(mu);
            rstd.push(rs);
        }
    }
    GroupStats { mean, rstd }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    gy: &[T],
    stats: &GroupStats<T>,
    batch: usize,
    channels: usize,
    spatial: usize,
    groups: usize,
    gx: Option<&mut [T]>,
    mut ggamma: Option<&mut [T]>,
    mut gbeta: Option<&mut [T]>,
) {
    let cpg = channels / groups;
    let len = cpg * spatial;
    let n = T::from_f64(len as f64);
    let mut gx = gx;
    for b in 0..batch {
        for g in 0..groups {
            let idx = b * groups + g;
            let (mu, rs) = (stats.mean[idx], stats.rstd[idx]);
            let start = (b * channels + g * cpg) * spatial;
            // Σ ĝ and Σ ĝ·x̂ over the group, with ĝ = gy·γ.
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for ci in 0..cpg {
                let c = g * cpg + ci;
                let off = start + ci * spatial;
                let mut cg = T::zero();
                let mut cgx = T::zero();
                for (&gv, &xv) in gy[off..off + spatial].iter().zip(&x[off..off + spatial]) {
                    let xh = (xv - mu) * rs;
                    cg += gv;
                    cgx += gv * xh;
                }
                if let Some(gb) = gbeta.as_deref_mut() {
                    gb[c] += cg;
                }
                if let Some(gg) = ggamma.as_deref_mut() {
                    gg[c] += cgx;
                }
                sum_g += cg * gamma[c];
                sum_gx += cgx * gamma[c];
            }
            if let Some(gx) = gx.as_deref_mut() {
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let off = start + ci * spatial;
                    let ga = gamma[c];
                    for j in off..off + spatial {
                        let xh = (x[j] - mu) * rs;
                        gx[j] += rs / n * (n * gy[j] * ga - sum_g - xh * sum_gx);
                    }
                }
            }
        }
    }
}

/// Softmax over rows of length `n`.
pub(crate) fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xs, os) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = xs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = (v - m).exp();
            total += *o;
        }
        let inv = T::one() / total;
        for o in os.iter_mut() {
            *o *= inv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.cout * g.oh * g.ow];
        for b in 0..g.batch {
            for o in 0..g.cout {
                for r in 0..g.oh {
                    for c in 0..g.ow {
                        let mut acc = 0.0;
                        for i in 0..g.cin {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let ih = (r * g.stride + kh) as isize - g.pad as isize;
                                    let iw = (c * g.stride + kw) as isize - g.pad as isize;
                                    if ih < 0 || iw < 0 || ih >= g.h as isize || iw >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((o * g.cin + i) * g.k + kh) * g.k + kw]
                                        * x[((b * g.cin + i) * g.h + ih as usize) * g.w + iw as usize];
                                }
                            }
                        }
                        out[((b * g.cout + o) * g.oh + r) * g.ow + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 5, 6), (2, 1, 3, 6, 6), (1, 0, 1, 4, 3), (2, 1, 3, 5, 7)] {
            let oh = ConvGeom::out_len(h, k, stride, pad).unwrap();
            let ow = ConvGeom::out_len(w, k, stride, pad).unwrap();
            let g = ConvGeom { batch: 2, cin: 3, h, w, cout: 2, k, stride, pad, oh, ow };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..2 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.5 - 1.0).collect();
            let mut out = vec![0.0; 2 * 2 * oh * ow];
            conv2d_forward(&g, &x, &wt, &mut out);
            assert_eq!(out, naive_conv(&x, &wt, &g), "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn softmax_rows_normalized() {
        let x = [1.0f64, 2.0, 3.0, -1.0, 0.0, 1000.0];
        let y = softmax_rows(&x, 3);
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
