use super::{ConvSpec, ConvWeights};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Gradient of `<grad_out, conv(x)>` with respect to `x`.
///
/// This is the transposed convolution: every output gradient is scattered back
/// through the (unflipped) kernel taps it was computed from. Each input plane
/// gathers from the output planes of its group, so planes are independent.
pub fn conv2d_vjp_input(grad_out: &Tensor, w: &ConvWeights, spec: &ConvSpec, input_shape: Shape) -> Result<Tensor> {
    let spec = spec.validated()?;
    w.check(&spec)?;
    let expected = spec.output_shape(input_shape)?;
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "grad_out {} does not match forward output {expected}",
            grad_out.shape()
        )));
    }
    let (k, s, p, d) = (spec.kernel, spec.stride, spec.padding as isize, spec.dilation);
    let (cin_g, cout_g) = (spec.in_per_group(), spec.out_per_group());
    let (oh, ow) = (expected.h, expected.w);
    let (ih, iw) = (input_shape.h, input_shape.w);
    let wdata = w.weight.data();

    let mut grad_in = Tensor::zeros(input_shape);
    par::for_each_plane(grad_in.data_mut(), ih * iw, |plane_idx, plane| {
        let n = plane_idx / input_shape.c;
        let c = plane_idx % input_shape.c;
        let group = c / cin_g;
        let ci = c % cin_g;
        for o in group * cout_g..(group + 1) * cout_g {
            let go = grad_out.plane(n, o);
            let wbase = (o * cin_g + ci) * k * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = go[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * s) as isize - p + (ky * d) as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let row = iy as usize * iw;
                        for kx in 0..k {
                            let ix = (ox * s) as isize - p + (kx * d) as isize;
                            if ix < 0 || ix >= iw as isize {
                                continue;
                            }
                            plane[row + ix as usize] += g * wdata[wbase + ky * k + kx];
                        }
                    }
                }
            }
        }
    });
    grad_in.debug_check_finite("conv2d_vjp_input");
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_direct;
    use crate::tensor::{Dist, Rng};

    #[test]
    fn zero_grad_gives_zero() {
        let spec = ConvSpec::depthwise(2, 3, 1, 1).unwrap();
        let shape = Shape::new(1, 2, 6, 6).unwrap();
        let w = ConvWeights::random(&spec, &mut Rng::new(0), Dist::DEFAULT_INIT).unwrap();
        let g = conv2d_vjp_input(&Tensor::zeros(shape), &w, &spec, shape).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_grad_shape_rejected() {
        let spec = ConvSpec::depthwise(2, 3, 2, 1).unwrap();
        let shape = Shape::new(1, 2, 6, 6).unwrap();
        let w = ConvWeights::random(&spec, &mut Rng::new(0), Dist::DEFAULT_INIT).unwrap();
        assert!(matches!(
            conv2d_vjp_input(&Tensor::zeros(shape), &w, &spec, shape),
            Err(Error::Shape(_))
        ));
    }

    /// Central finite differences of `<g, conv(x)>` in f64 around `x`.
    fn finite_difference(x: &Tensor, g: &Tensor, w: &ConvWeights, spec: &ConvSpec, step: f32) -> Vec<f64> {
        let objective = |t: &Tensor| -> f64 {
            let y = conv2d_direct(t, w, spec).unwrap();
            y.data().iter().zip(g.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += step;
                let mut minus = x.clone();
                minus.data_mut()[i] -= step;
                (objective(&plus) - objective(&minus)) / (2.0 * step as f64)
            })
            .collect()
    }

    #[test]
    fn one_hot_center_returns_flipped_kernel() {
        let k = 5;
        let spec = ConvSpec::depthwise(1, k, 1, 1).unwrap();
        let shape = Shape::new(1, 1, 9, 9).unwrap();
        let mut rng = Rng::new(21);
        let w = ConvWeights::random(&spec, &mut rng, Dist::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let mut g = Tensor::zeros(shape);
        g.set(0, 0, 4, 4, 1.0);
        let grad = conv2d_vjp_input(&g, &w, &spec, shape).unwrap();

        // Output (4,4) reads x[4 - 2 + u, 4 - 2 + v] * w[u, v].
        for y in 0..9 {
            for x in 0..9 {
                let expected = if (2..7).contains(&y) && (2..7).contains(&x) {
                    w.weight.at(0, 0, y - 2, x - 2)
                } else {
                    0.0
                };
                assert_eq!(grad.at(0, 0, y, x), expected);
            }
        }

        let x = Tensor::new_random(shape, &mut rng, Dist::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
        let fd = finite_difference(&x, &g, &w, &spec, 1e-3);
        for (a, b) in grad.data().iter().zip(&fd) {
            assert!((*a as f64 - b).abs() <= 1e-3 * b.abs().max(1.0));
        }
    }

    #[test]
    fn random_cases_match_finite_difference() {
        let mut rng = Rng::new(99);
        for (k, stride, dilation, groups_dense) in [
            (3, 1, 1, false),
            (3, 2, 1, true),
            (13, 1, 1, false),
            (3, 1, 2, false),
            (13, 2, 1, true),
        ] {
            let spec = if groups_dense {
                ConvSpec::dense(2, 3, k, stride, k / 2).unwrap()
            } else {
                ConvSpec::depthwise(2, k, stride, dilation).unwrap()
            };
            let shape = Shape::new(1, 2, 15, 14).unwrap();
            let w = ConvWeights::random(&spec, &mut rng, Dist::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
            let x = Tensor::new_random(shape, &mut rng, Dist::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
            let g = Tensor::new_random(
                spec.output_shape(shape).unwrap(),
                &mut rng,
                Dist::Uniform { lo: -1.0, hi: 1.0 },
            )
            .unwrap();
            let grad = conv2d_vjp_input(&g, &w, &spec, shape).unwrap();
            let fd = finite_difference(&x, &g, &w, &spec, 1e-2);
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (a, b) in grad.data().iter().zip(&fd) {
                assert!((*a as f64 - b).abs() <= 1e-3 * scale, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }
}
