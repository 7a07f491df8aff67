use super::{prepare, ConvSpec, ConvWeights};
use crate::error::Result;
use crate::par;
use crate::tensor::Tensor;

/// Reference convolution: one bounds-checked dot product per output pixel,
/// accumulated in f64 and rounded once.
pub fn conv2d_direct(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    let out_shape = prepare(x, w, spec)?;
    let xs = x.shape();
    let (k, s, p, d) = (spec.kernel, spec.stride, spec.padding as isize, spec.dilation);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let (oh, ow) = (out_shape.h, out_shape.w);
    let wdata = w.weight.data();

    let mut out = Tensor::zeros(out_shape);
    par::for_each_plane(out.data_mut(), oh * ow, |plane_idx, plane| {
        let n = plane_idx / spec.out_channels;
        let o = plane_idx % spec.out_channels;
        let group = o / cout_g;
        let bias = w.bias_or_zero(o);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..cin_g {
                    let c = group * cin_g + ci;
                    let xplane = x.plane(n, c);
                    let wbase = (o * cin_g + ci) * k * k;
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + (ky * d) as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s) as isize - p + (kx * d) as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            acc += xplane[iy as usize * xs.w + ix as usize] as f64 * wdata[wbase + ky * k + kx] as f64;
                        }
                    }
                }
                plane[oy * ow + ox] = (acc + bias as f64) as f32;
            }
        }
    });
    out.debug_check_finite("conv2d_direct");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn ones(shape: Shape) -> Tensor {
        Tensor::new_filled(shape, 1.0)
    }

    #[test]
    fn all_ones_3x3_window_counts() {
        let spec = ConvSpec::depthwise(1, 3, 1, 1).unwrap();
        let x = ones(Shape::new(1, 1, 3, 3).unwrap());
        let w = ConvWeights::new(ones(spec.weight_shape()), None).unwrap();
        let y = conv2d_direct(&x, &w, &spec).unwrap();
        // Hand count of in-bounds taps per output position.
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn large_kernel_same_padding_shape() {
        let spec = ConvSpec::depthwise(1, 31, 1, 1).unwrap();
        let x = ones(Shape::new(1, 1, 16, 16).unwrap());
        let w = ConvWeights::new(ones(spec.weight_shape()), None).unwrap();
        let y = conv2d_direct(&x, &w, &spec).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 16, 16).unwrap());
    }

    #[test]
    fn bias_is_added() {
        let spec = ConvSpec::pointwise(2, 1).unwrap();
        let x = ones(Shape::new(1, 2, 2, 2).unwrap());
        let w = ConvWeights::new(ones(spec.weight_shape()), Some(vec![0.5])).unwrap();
        let y = conv2d_direct(&x, &w, &spec).unwrap();
        assert_eq!(y.data(), &[2.5; 4]);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let spec = ConvSpec::depthwise(2, 3, 1, 1).unwrap();
        let x = ones(Shape::new(1, 2, 4, 4).unwrap());
        let w = ConvWeights::new(ones(Shape::new(2, 1, 5, 5).unwrap()), None).unwrap();
        assert!(conv2d_direct(&x, &w, &spec).is_err());
        let x3 = ones(Shape::new(1, 3, 4, 4).unwrap());
        let w = ConvWeights::new(ones(spec.weight_shape()), None).unwrap();
        assert!(conv2d_direct(&x3, &w, &spec).is_err());
    }
}
