mod common;

use common::{normal, random_bn, rel_err, shape};
use proptest::prelude::*;
use rlk_core::conv::{Backend, ConvSpec, ConvWeights};
use rlk_core::reparam::{aggregate_kernel, densify_dilated, fuse_bn, merge_branches, BranchedConv};
use rlk_core::tensor::{Dist, Rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bn_fold_preserves_function(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5, 7]), dense in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let spec = if dense {
            ConvSpec::dense(3, 4, k, 1, k / 2).unwrap()
        } else {
            ConvSpec::depthwise(4, k, 1, 1).unwrap()
        };
        let w = ConvWeights::random(&spec, &mut rng, Dist::Normal { mean: 0.0, std: 0.3 }).unwrap();
        let bn = random_bn(spec.out_channels, &mut rng);
        let x = normal(shape(2, spec.in_channels, 11, 9), &mut rng, 1.0);
        let want = bn.apply(&Backend::Direct.conv2d(&x, &w, &spec).unwrap()).unwrap();
        let got = Backend::Direct.conv2d(&x, &fuse_bn(&w, &bn).unwrap().into_conv_weights(), &spec).unwrap();
        prop_assert!(rel_err(&got, &want) <= 1e-5);
    }

    #[test]
    fn merged_branches_match_two_branch_forward(
        seed in any::<u64>(),
        big in prop::sample::select(vec![7usize, 13, 31]),
        small in prop::sample::select(vec![3usize, 5]),
    ) {
        let mut rng = Rng::new(seed);
        let c = 2;
        let big_spec = ConvSpec::depthwise(c, big, 1, 1).unwrap();
        let small_spec = ConvSpec::depthwise(c, small, 1, 1).unwrap();
        let b = BranchedConv {
            large: (ConvWeights::random(&big_spec, &mut rng, Dist::Normal { mean: 0.0, std: 0.1 }).unwrap(), random_bn(c, &mut rng)),
            small: Some((ConvWeights::random(&small_spec, &mut rng, Dist::Normal { mean: 0.0, std: 0.3 }).unwrap(), random_bn(c, &mut rng))),
        };
        let x = normal(shape(1, c, 20, 24), &mut rng, 1.0);
        let (lw, lbn) = &b.large;
        let (sw, sbn) = b.small.as_ref().unwrap();
        let want = lbn.apply(&Backend::Direct.conv2d(&x, lw, &big_spec).unwrap()).unwrap()
            .add(&sbn.apply(&Backend::Direct.conv2d(&x, sw, &small_spec).unwrap()).unwrap()).unwrap();
        let fused = merge_branches(&b).unwrap().into_conv_weights();
        for backend in Backend::ALL {
            let got = backend.conv2d(&x, &fused, &big_spec).unwrap();
            prop_assert!(rel_err(&got, &want) <= 1e-4, "{backend}");
        }
    }

    #[test]
    fn aggregate_ignores_positive_scale(seed in any::<u64>(), alpha in 0.01f32..100.0, pow in -6i32..6) {
        let mut rng = Rng::new(seed);
        let spec = ConvSpec::depthwise(8, 9, 1, 1).unwrap();
        let w = ConvWeights::random(&spec, &mut rng, Dist::DEFAULT_INIT).unwrap();
        let base = aggregate_kernel(&w).unwrap();

        let scaled = ConvWeights::new(w.weight.scale(alpha), None).unwrap();
        let diff = aggregate_kernel(&scaled).unwrap().data.iter().zip(&base.data)
            .map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        prop_assert!(diff <= 1e-6, "{diff}");

        // Powers of two scale without rounding.
        let exact = ConvWeights::new(w.weight.scale(2f32.powi(pow)), None).unwrap();
        prop_assert_eq!(aggregate_kernel(&exact).unwrap(), base);
    }
}

#[test]
fn densified_kernels_reproduce_dilated_convolution() {
    for k in [3, 5] {
        for d in [1, 2, 4, 6] {
            let mut rng = Rng::new((k * d) as u64);
            let dilated = ConvSpec::depthwise(3, k, 1, d).unwrap();
            let w = ConvWeights::random(&dilated, &mut rng, Dist::Normal { mean: 0.0, std: 0.3 }).unwrap();
            let dense_w = densify_dilated(&w, d).unwrap();
            assert_eq!(dense_w.kernel(), (k - 1) * d + 1);
            let dense = ConvSpec::depthwise(3, dense_w.kernel(), 1, 1).unwrap();
            let x = normal(shape(1, 3, 33, 30), &mut rng, 1.0);
            for backend in Backend::ALL {
                let want = backend.conv2d(&x, &w, &dilated).unwrap();
                let got = backend.conv2d(&x, &dense_w, &dense).unwrap();
                assert!(rel_err(&got, &want) <= 1e-6, "{backend} k={k} d={d}");
            }
        }
    }
}

#[test]
fn dilated_three_by_three_rows() {
    // 3x3 at dilation 4 and 6 span the same window as dense 9x9 and 13x13.
    for (d, dense) in [(4, 9), (6, 13)] {
        let spec = ConvSpec::depthwise(1, 3, 1, d).unwrap();
        let w = ConvWeights::random(&spec, &mut Rng::new(1), Dist::DEFAULT_INIT).unwrap();
        let out = densify_dilated(&w, d).unwrap();
        assert_eq!(out.kernel(), dense);
        let nonzero = out.weight.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, w.weight.data().iter().filter(|v| **v != 0.0).count());
        assert_eq!(out.weight.at(0, 0, 0, 0), w.weight.at(0, 0, 0, 0));
        assert_eq!(out.weight.at(0, 0, dense - 1, dense - 1), w.weight.at(0, 0, 2, 2));
    }
}
