#![allow(dead_code)]

use rlk_core::reparam::BnParams;
use rlk_core::tensor::{Dist, Rng, Shape, Tensor};

/// `max|got - want| / max|want|`.
pub fn rel_err(got: &Tensor, want: &Tensor) -> f32 {
    assert_eq!(got.shape(), want.shape());
    let diff = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    diff / want.max_abs().max(f32::MIN_POSITIVE)
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

pub fn normal(shape: Shape, rng: &mut Rng, std: f32) -> Tensor {
    Tensor::new_random(shape, rng, Dist::Normal { mean: 0.0, std }).unwrap()
}

pub fn uniform_vec(n: usize, lo: f32, hi: f32, rng: &mut Rng) -> Vec<f32> {
    Tensor::new_random(shape(1, 1, 1, n), rng, Dist::Uniform { lo, hi })
        .unwrap()
        .into_vec()
}

pub fn random_bn(channels: usize, rng: &mut Rng) -> BnParams {
    BnParams::new(
        uniform_vec(channels, 0.5, 1.5, rng),
        uniform_vec(channels, -0.2, 0.2, rng),
        uniform_vec(channels, -0.2, 0.2, rng),
        uniform_vec(channels, 0.5, 1.5, rng),
        1e-5,
    )
    .unwrap()
}

/// Uniform integer in `lo..=hi`.
pub fn pick(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
}
