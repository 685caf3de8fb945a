//! Strided, zero-padded 2D cross-correlation and its adjoints.
//!
//! All three kernels share one index map: output pixel `(oi, oj)` of the
//! forward correlation reads input pixel `(oi*s + ki - p, oj*s + kj - p)`
//! with `p = (k - 1) / 2`. The transposed convolution is the exact adjoint of
//! the forward pass, so both share the same gradient kernels. Each kernel
//! unrolls image patches into a matrix and runs one GEMM per sample.

use super::gemm::{gemm_acc, Layout};

/// Geometry of one correlation between a "wide" side `[C, H, W]` and a
/// "narrow" side `[F, Ho, Wo]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    fn pad(&self) -> isize {
        ((self.k - 1) / 2) as isize
    }

    /// Valid output range `oi` such that `oi*s + ki - p` lies in `[0, n)`.
    #[inline]
    fn range(&self, ki: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = ki as isize - self.pad();
        // smallest oi with oi*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest oi with oi*s + off <= n - 1
        let hi = (n as isize - 1 - off).div_euclid(s) + 1;
        let hi = hi.clamp(0, n_out as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Unrolls one `[C, H, W]` image into a `[C·k·k, Ho·Wo]` patch matrix
/// (zero where the window leaves the image).
fn im2col(g: &ConvGeom, x_img: &[f64], cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let p = g.pad();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.in_ch {
        let x_plane = &x_img[c * h * w..][..h * w];
        for ki in 0..k {
            let (oi_lo, oi_hi) = g.range(ki, h, ho);
            for kj in 0..k {
                let (oj_lo, oj_hi) = g.range(kj, w, wo);
                let row = &mut cols[((c * k + ki) * k + kj) * ho * wo..][..ho * wo];
                for oi in oi_lo..oi_hi {
                    let i = (oi * s) as isize + ki as isize - p;
                    let x_row = &x_plane[i as usize * w..][..w];
                    let mut j = ((oj_lo * s) as isize + kj as isize - p) as usize;
                    for v in &mut row[oi * wo + oj_lo..oi * wo + oj_hi] {
                        *v = x_row[j];
                        j += s;
                    }
                }
            }
        }
    }
}

/// Adds a patch matrix back onto its image; the adjoint of [`im2col`].
fn col2im(g: &ConvGeom, cols: &[f64], x_img: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let p = g.pad();
    for c in 0..g.in_ch {
        let x_plane = &mut x_img[c * h * w..][..h * w];
        for ki in 0..k {
            let (oi_lo, oi_hi) = g.range(ki, h, ho);
            for kj in 0..k {
                let (oj_lo, oj_hi) = g.range(kj, w, wo);
                let row = &cols[((c * k + ki) * k + kj) * ho * wo..][..ho * wo];
                for oi in oi_lo..oi_hi {
                    let i = (oi * s) as isize + ki as isize - p;
                    let x_row = &mut x_plane[i as usize * w..][..w];
                    let mut j = ((oj_lo * s) as isize + kj as isize - p) as usize;
                    for v in &row[oi * wo + oj_lo..oi * wo + oj_hi] {
                        x_row[j] += v;
                        j += s;
                    }
                }
            }
        }
    }
}

fn patch_len(g: &ConvGeom) -> usize {
    g.in_ch * g.k * g.k
}

/// `y[b,f] += sum_c x[b,c] ⋆ kernel[f,c]`; `y` has shape `[B, F, Ho, Wo]`.
pub fn correlate(g: &ConvGeom, x: &[f64], kernel: &[f64], y: &mut [f64]) {
    let (plane, ckk) = (g.out_h() * g.out_w(), patch_len(g));
    let mut cols = vec![0.0; ckk * plane];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_ch * g.h * g.w..][..g.in_ch * g.h * g.w], &mut cols);
        let y_b = &mut y[b * g.out_ch * plane..][..g.out_ch * plane];
        gemm_acc(g.out_ch, ckk, plane, kernel, Layout::Plain, &cols, Layout::Plain, y_b);
    }
}

/// Adjoint of [`correlate`] with respect to its input:
/// `x[b,c] += sum_f y[b,f] ⋆ᵀ kernel[f,c]`.
pub fn correlate_adjoint(g: &ConvGeom, y: &[f64], kernel: &[f64], x: &mut [f64]) {
    let (plane, ckk) = (g.out_h() * g.out_w(), patch_len(g));
    let mut cols = vec![0.0; ckk * plane];
    for b in 0..g.batch {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let y_b = &y[b * g.out_ch * plane..][..g.out_ch * plane];
        gemm_acc(ckk, g.out_ch, plane, kernel, Layout::Transposed, y_b, Layout::Plain, &mut cols);
        col2im(g, &cols, &mut x[b * g.in_ch * g.h * g.w..][..g.in_ch * g.h * g.w]);
    }
}

/// Gradient of `<y_grad, correlate(x, kernel)>` with respect to the kernel.
pub fn correlate_kernel_grad(g: &ConvGeom, x: &[f64], y_grad: &[f64], kernel_grad: &mut [f64]) {
    let (plane, ckk) = (g.out_h() * g.out_w(), patch_len(g));
    let mut cols = vec![0.0; ckk * plane];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_ch * g.h * g.w..][..g.in_ch * g.h * g.w], &mut cols);
        let y_b = &y_grad[b * g.out_ch * plane..][..g.out_ch * plane];
        gemm_acc(g.out_ch, plane, ckk, y_b, Layout::Plain, &cols, Layout::Transposed, kernel_grad);
    }
}
