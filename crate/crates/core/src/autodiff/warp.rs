//! Differentiable composition of channel-first displacement fields.
//!
//! `out(x) = inner(x) + outer(x + inner(x))`, sampled with the clamped
//! bilinear convention of [`crate::field`]. Tensors are `[B, 2, H, W]` with
//! channel 0 the row displacement and channel 1 the column displacement.

use crate::field::Cell;

pub fn warp_forward(b: usize, h: usize, w: usize, outer: &[f64], inner: &[f64], out: &mut [f64]) {
    let n = h * w;
    for s in 0..b {
        let base = s * 2 * n;
        let o_r = &outer[base..base + n];
        let o_c = &outer[base + n..base + 2 * n];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let dr = inner[base + p];
                let dc = inner[base + n + p];
                let cell = Cell::locate(h, w, r as f64 + dr, c as f64 + dc);
                out[base + p] = dr + cell.interpolate(|i, j| o_r[i * w + j]);
                out[base + n + p] = dc + cell.interpolate(|i, j| o_c[i * w + j]);
            }
        }
    }
}

/// Accumulates input gradients of [`warp_forward`] given the output
/// gradient. Either target may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn warp_backward(
    b: usize,
    h: usize,
    w: usize,
    outer: &[f64],
    inner: &[f64],
    grad_out: &[f64],
    mut grad_outer: Option<&mut [f64]>,
    mut grad_inner: Option<&mut [f64]>,
) {
    let n = h * w;
    for s in 0..b {
        let base = s * 2 * n;
        let o_r = &outer[base..base + n];
        let o_c = &outer[base + n..base + 2 * n];
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let dr = inner[base + p];
                let dc = inner[base + n + p];
                let gr = grad_out[base + p];
                let gc = grad_out[base + n + p];
                let cell = Cell::locate(h, w, r as f64 + dr, c as f64 + dc);
                if let Some(go) = grad_outer.as_deref_mut() {
                    let wts = cell.weights();
                    let idx = [
                        cell.r0 * w + cell.c0,
                        cell.r0 * w + cell.c1,
                        cell.r1 * w + cell.c0,
                        cell.r1 * w + cell.c1,
                    ];
                    for (q, wt) in idx.iter().zip(wts) {
                        go[base + q] += wt * gr;
                        go[base + n + q] += wt * gc;
                    }
                }
                if let Some(gi) = grad_inner.as_deref_mut() {
                    let (rr, rc) = cell.gradient(|i, j| o_r[i * w + j]);
                    let (cr, cc) = cell.gradient(|i, j| o_c[i * w + j]);
                    gi[base + p] += gr * (1.0 + rr) + gc * cr;
                    gi[base + n + p] += gr * rc + gc * (1.0 + cc);
                }
            }
        }
    }
}

/// Feeds the interpolation cell and clamp state of every sample into `sink`;
/// used to detect finite-difference steps that cross a kink.
pub fn warp_cells(b: usize, h: usize, w: usize, inner: &[f64], mut sink: impl FnMut(u64)) {
    let n = h * w;
    for s in 0..b {
        let base = s * 2 * n;
        for r in 0..h {
            for c in 0..w {
                let p = r * w + c;
                let cell = Cell::locate(h, w, r as f64 + inner[base + p], c as f64 + inner[base + n + p]);
                sink(((cell.r0 as u64) << 32) | cell.c0 as u64);
                sink(u64::from(cell.row_clamped) | (u64::from(cell.col_clamped) << 1));
                // integer coordinates sit on a kink of the interpolant
                sink(u64::from(cell.tr == 0.0) | (u64::from(cell.tc == 0.0) << 1));
            }
        }
    }
}
