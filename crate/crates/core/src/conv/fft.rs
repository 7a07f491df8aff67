use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{prepare, ConvSpec, ConvWeights};
use crate::error::Result;
use crate::par;
use crate::tensor::Tensor;

/// FFT convolution, computed per channel plane in `f64`.
///
/// The input is zero padded by `padding` and used as the transform size
/// directly: correlating with a kernel of effective extent `e` only reads
/// circular-convolution indices `e - 1 ..`, which never wrap. The kernel is
/// dilated, flipped and transformed once per `(out, in)` pair. Stride 2 takes
/// every second sample of the stride-1 result.
pub fn conv2d_fft(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    let out_shape = prepare(x, w, spec)?;
    let xs = x.shape();
    let (k, s, p, d) = (spec.kernel, spec.stride, spec.padding, spec.dilation);
    let ext = spec.effective_kernel();
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let (nh, nw) = (xs.h + 2 * p, xs.w + 2 * p);
    let (oh, ow) = (out_shape.h, out_shape.w);

    let mut planner = FftPlanner::<f64>::new();
    let plan = Plan2d {
        rows: nh,
        cols: nw,
        row_fwd: planner.plan_fft_forward(nw),
        row_inv: planner.plan_fft_inverse(nw),
        col_fwd: planner.plan_fft_forward(nh),
        col_inv: planner.plan_fft_inverse(nh),
    };

    let input_spectra: Vec<Vec<Complex64>> = par::map_indices(xs.n * xs.c, |i| {
        let (n, c) = (i / xs.c, i % xs.c);
        let src = x.plane(n, c);
        let mut buf = vec![Complex64::default(); nh * nw];
        for y in 0..xs.h {
            for xx in 0..xs.w {
                buf[(y + p) * nw + xx + p] = Complex64::new(src[y * xs.w + xx] as f64, 0.0);
            }
        }
        plan.forward(&mut buf);
        buf
    });

    let wdata = w.weight.data();
    let kernel_spectra: Vec<Vec<Complex64>> = par::map_indices(spec.out_channels * cin_g, |i| {
        let mut buf = vec![Complex64::default(); nh * nw];
        for u in 0..k {
            for v in 0..k {
                let fy = ext - 1 - u * d;
                let fx = ext - 1 - v * d;
                buf[fy * nw + fx] = Complex64::new(wdata[i * k * k + u * k + v] as f64, 0.0);
            }
        }
        plan.forward(&mut buf);
        buf
    });

    let norm = 1.0 / (nh * nw) as f64;
    let mut out = Tensor::zeros(out_shape);
    par::for_each_plane(out.data_mut(), oh * ow, |plane_idx, plane| {
        let n = plane_idx / spec.out_channels;
        let o = plane_idx % spec.out_channels;
        let group = o / cout_g;
        let mut acc = vec![Complex64::default(); nh * nw];
        for ci in 0..cin_g {
            let c = group * cin_g + ci;
            let xf = &input_spectra[n * xs.c + c];
            let kf = &kernel_spectra[o * cin_g + ci];
            for ((a, &xv), &kv) in acc.iter_mut().zip(xf).zip(kf) {
                *a += xv * kv;
            }
        }
        plan.inverse(&mut acc);
        let bias = w.bias_or_zero(o) as f64;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = acc[(oy * s + ext - 1) * nw + ox * s + ext - 1].re * norm;
                plane[oy * ow + ox] = (v + bias) as f32;
            }
        }
    });
    out.debug_check_finite("conv2d_fft");
    Ok(out)
}

struct Plan2d {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Plan2d {
    fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalized inverse.
    fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    fn run(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        // Rows are contiguous, so one call transforms all of them.
        row.process(buf);
        let mut column = vec![Complex64::default(); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                column[r] = buf[r * self.cols + c];
            }
            col.process(&mut column);
            for r in 0..self.rows {
                buf[r * self.cols + c] = column[r];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn constant_input_interior_sum() {
        let spec = ConvSpec::depthwise(1, 7, 1, 1).unwrap();
        let x = Tensor::new_filled(Shape::new(1, 1, 16, 16).unwrap(), 0.5);
        let w = ConvWeights::new(Tensor::new_filled(spec.weight_shape(), 1.0), None).unwrap();
        let y = conv2d_fft(&x, &w, &spec).unwrap();
        for oy in 3..13 {
            for ox in 3..13 {
                assert!((y.at(0, 0, oy, ox) - 49.0 * 0.5).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let spec = ConvSpec::depthwise(2, 5, 1, 1).unwrap();
        let mut rng = crate::tensor::Rng::new(2);
        let x = Tensor::new_random(
            Shape::new(1, 2, 9, 12).unwrap(),
            &mut rng,
            crate::tensor::Dist::Uniform { lo: -1.0, hi: 1.0 },
        )
        .unwrap();
        let mut w = Tensor::zeros(spec.weight_shape());
        w.set(0, 0, 2, 2, 1.0);
        w.set(1, 0, 2, 2, 1.0);
        let y = conv2d_fft(&x, &ConvWeights::new(w, None).unwrap(), &spec).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
