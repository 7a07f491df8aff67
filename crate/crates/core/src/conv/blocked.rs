use super::{prepare, ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Output tile edge used by [`conv2d_blocked`].
pub const DEFAULT_TILE: usize = 8;

/// Cache-tiled convolution with the default 8x8 output tile.
pub fn conv2d_blocked(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_blocked_with_tile(x, w, spec, DEFAULT_TILE)
}

/// Block-wise implicit-GEMM style convolution.
///
/// The output plane is walked in `tile x tile` blocks. For each block the
/// input patch it reads is copied (zero padded) into a contiguous staging
/// buffer, and the `k x k` reduction runs over that buffer into a small
/// accumulator block. No im2col matrix is materialized.
pub fn conv2d_blocked_with_tile(x: &Tensor, w: &ConvWeights, spec: &ConvSpec, tile: usize) -> Result<Tensor> {
    if tile == 0 {
        return Err(Error::param("tile size must be positive"));
    }
    let out_shape = prepare(x, w, spec)?;
    let xs = x.shape();
    let (k, s, d) = (spec.kernel, spec.stride, spec.dilation);
    let pad = spec.padding as isize;
    let ext = spec.effective_kernel();
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let (oh, ow) = (out_shape.h, out_shape.w);
    let wdata = w.weight.data();
    let patch_edge = (tile - 1) * s + ext;

    let mut out = Tensor::zeros(out_shape);
    par::for_each_plane(out.data_mut(), oh * ow, |plane_idx, plane| {
        let n = plane_idx / spec.out_channels;
        let o = plane_idx % spec.out_channels;
        let group = o / cout_g;
        let bias = w.bias_or_zero(o);
        let mut patch = vec![0.0f32; patch_edge * patch_edge];
        let mut acc = vec![0.0f32; tile * tile];

        for ty0 in (0..oh).step_by(tile) {
            let th = tile.min(oh - ty0);
            for tx0 in (0..ow).step_by(tile) {
                let tw = tile.min(ow - tx0);
                let ph = (th - 1) * s + ext;
                let pw = (tw - 1) * s + ext;
                acc.iter_mut().for_each(|a| *a = 0.0);

                for ci in 0..cin_g {
                    let c = group * cin_g + ci;
                    stage_patch(
                        x.plane(n, c),
                        xs.h,
                        xs.w,
                        (ty0 * s) as isize - pad,
                        (tx0 * s) as isize - pad,
                        ph,
                        pw,
                        &mut patch,
                    );
                    let wbase = (o * cin_g + ci) * k * k;
                    let taps = &wdata[wbase..wbase + k * k];
                    if s == 1 && tw == LANES && tile == LANES {
                        for ty in 0..th {
                            let acc_row: &mut [f32; LANES] =
                                (&mut acc[ty * LANES..(ty + 1) * LANES]).try_into().unwrap();
                            accumulate_row(acc_row, &patch[ty * pw..], pw, taps, k, d);
                        }
                        continue;
                    }
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wdata[wbase + ky * k + kx];
                            for ty in 0..th {
                                let row = &patch[(ty * s + ky * d) * pw + kx * d..];
                                let acc_row = &mut acc[ty * tile..ty * tile + tw];
                                if s == 1 {
                                    for (a, &v) in acc_row.iter_mut().zip(&row[..tw]) {
                                        *a += wv * v;
                                    }
                                } else {
                                    for (tx, a) in acc_row.iter_mut().enumerate() {
                                        *a += wv * row[tx * s];
                                    }
                                }
                            }
                        }
                    }
                }

                for ty in 0..th {
                    let dst = &mut plane[(ty0 + ty) * ow + tx0..(ty0 + ty) * ow + tx0 + tw];
                    for (o, &a) in dst.iter_mut().zip(&acc[ty * tile..ty * tile + tw]) {
                        *o = a + bias;
                    }
                }
            }
        }
    });
    out.debug_check_finite("conv2d_blocked");
    Ok(out)
}

const LANES: usize = 8;

/// One output row of a full-width stride-1 tile. The row lives in registers
/// for the whole `k x k` reduction; taps are visited in the same order as the
/// generic path.
#[inline(always)]
fn accumulate_row(acc: &mut [f32; LANES], patch: &[f32], pw: usize, taps: &[f32], k: usize, d: usize) {
    let mut a = *acc;
    for ky in 0..k {
        let row = &patch[ky * d * pw..];
        for kx in 0..k {
            let wv = taps[ky * k + kx];
            let v: &[f32; LANES] = row[kx * d..kx * d + LANES].try_into().unwrap();
            for i in 0..LANES {
                a[i] += wv * v[i];
            }
        }
    }
    *acc = a;
}

/// Copies the `ph x pw` window whose top-left corner sits at `(y0, x0)` in the
/// (virtually zero-padded) source plane into `patch`, row stride `pw`.
#[allow(clippy::too_many_arguments)]
fn stage_patch(src: &[f32], h: usize, w: usize, y0: isize, x0: isize, ph: usize, pw: usize, patch: &mut [f32]) {
    let x_lo = x0.max(0);
    let x_hi = (x0 + pw as isize).min(w as isize);
    for py in 0..ph {
        let dst = &mut patch[py * pw..(py + 1) * pw];
        let iy = y0 + py as isize;
        if iy < 0 || iy >= h as isize || x_lo >= x_hi {
            dst.fill(0.0);
            continue;
        }
        let lead = (x_lo - x0) as usize;
        let len = (x_hi - x_lo) as usize;
        dst[..lead].fill(0.0);
        let row = iy as usize * w;
        dst[lead..lead + len].copy_from_slice(&src[row + x_lo as usize..row + x_hi as usize]);
        dst[lead + len..].fill(0.0);
    }
}
