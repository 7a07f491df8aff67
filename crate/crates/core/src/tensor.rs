//! Dense NCHW `f32` tensors, seeded initialization and the handful of
//! elementwise ops the models need.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `sqrt(2 / pi)`, used by the tanh form of GELU.
#[allow(clippy::excessive_precision)]
pub const GELU_SQRT_2_OVER_PI: f32 = 0.797_884_6;
pub const GELU_CUBIC: f32 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("zero-sized dimension in ({n}, {c}, {h}, {w})")));
        }
        Ok(Shape { n, c, h, w })
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Seeded generator. The stream is ChaCha8 keyed by the 64-bit seed, which is
/// specified bit-for-bit and therefore identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A child generator whose stream depends only on this seed and `stream`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Normal { mean: f32, std: f32 },
    Uniform { lo: f32, hi: f32 },
}

impl Dist {
    /// The default weight initializer, `normal(0, 0.02)`.
    pub const DEFAULT_INIT: Dist = Dist::Normal { mean: 0.0, std: 0.02 };

    fn validate(&self) -> Result<()> {
        match *self {
            Dist::Normal { mean, std } if mean.is_finite() && std.is_finite() && std > 0.0 => Ok(()),
            Dist::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            other => Err(Error::param(format!("invalid distribution {other:?}"))),
        }
    }

    pub(crate) fn sample_vec(&self, rng: &mut Rng, len: usize) -> Result<Vec<f32>> {
        self.validate()?;
        let data = match *self {
            Dist::Normal { mean, std } => {
                let d = Normal::new(mean, std).map_err(|e| Error::param(e.to_string()))?;
                (0..len).map(|_| d.sample(&mut rng.inner)).collect()
            }
            Dist::Uniform { lo, hi } => {
                let d = Uniform::new(lo, hi);
                (0..len).map(|_| d.sample(&mut rng.inner)).collect()
            }
        };
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn new_filled(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new_filled(shape, 0.0)
    }

    pub fn new_random(shape: Shape, rng: &mut Rng, dist: Dist) -> Result<Self> {
        let data = dist.sample_vec(rng, shape.numel())?;
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h*w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f32) -> Tensor {
        self.map(|v| v * alpha)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {} and {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn relu(&self) -> Tensor {
        self.map(relu)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    /// Mean over each `h*w` plane, giving shape `(n, c, 1, 1)`.
    pub fn global_avg_pool(&self) -> Tensor {
        let Shape { n, c, .. } = self.shape;
        let p = self.shape.plane();
        let data = self
            .data
            .chunks(p)
            .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / p as f64) as f32)
            .collect();
        Tensor {
            shape: Shape { n, c, h: 1, w: 1 },
            data,
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn debug_check_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "non-finite value produced by {what}");
    }
}

#[inline]
pub fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// A plain row-major 2-D matrix, used for aggregated kernels and ERF maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Side length of the bounding box of nonzero entries, `(rows, cols)`.
    pub fn support_extent(&self) -> Option<(usize, usize)> {
        let mut r0 = usize::MAX;
        let mut r1 = 0;
        let mut c0 = usize::MAX;
        let mut c1 = 0;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.at(r, c) != 0.0 {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                }
            }
        }
        (r0 != usize::MAX).then(|| (r1 - r0 + 1, c1 - c0 + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape::new(n, c, h, w).unwrap()
    }

    #[test]
    fn filled_tensors() {
        let t = Tensor::new_filled(shape(1, 1, 2, 2), 0.0);
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new_filled(shape(2, 3, 4, 4), 1.0);
        assert_eq!(t.len(), 96);
        assert!(t.data().iter().all(|&v| v == 1.0));
        let t = Tensor::new_filled(shape(1, 1, 1, 1), -2.5);
        assert_eq!(t.data(), &[-2.5]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(Shape::new(1, 0, 2, 2), Err(Error::Shape(_))));
        assert!(Tensor::from_vec(shape(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn random_is_reproducible_and_seed_sensitive() {
        let s = shape(1, 1, 4, 4);
        let d = Dist::Normal { mean: 0.0, std: 0.02 };
        let a = Tensor::new_random(s, &mut Rng::new(7), d).unwrap();
        let b = Tensor::new_random(s, &mut Rng::new(7), d).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let s = shape(1, 1, 2, 2);
        let n01 = Dist::Normal { mean: 0.0, std: 1.0 };
        let a = Tensor::new_random(s, &mut Rng::new(3), n01).unwrap();
        let b = Tensor::new_random(s, &mut Rng::new(4), n01).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn uniform_mean() {
        let t = Tensor::new_random(
            shape(1, 1, 64, 64),
            &mut Rng::new(1),
            Dist::Uniform { lo: 0.0, hi: 1.0 },
        )
        .unwrap();
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
        assert!(t.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn invalid_distributions() {
        let s = shape(1, 1, 2, 2);
        let mut rng = Rng::new(0);
        for d in [
            Dist::Normal { mean: 0.0, std: 0.0 },
            Dist::Normal { mean: 0.0, std: -1.0 },
            Dist::Uniform { lo: 1.0, hi: 1.0 },
            Dist::Uniform { lo: 0.0, hi: f32::NAN },
        ] {
            assert!(matches!(
                Tensor::new_random(s, &mut rng, d),
                Err(Error::InvalidParam(_))
            ));
        }
    }

    #[test]
    fn activations() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert_eq!(gelu(0.0), 0.0);
        // Reference values of the tanh form.
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            let h = 1e-4;
            let f = |v: f64| {
                let inner = 0.797_884_560_8 * (v + 0.044_715 * v * v * v);
                0.5 * v * (1.0 + inner.tanh())
            };
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((gelu_grad(x as f32) as f64 - fd).abs() < 1e-5, "x={x}");
        }
    }

    #[test]
    fn pooling_and_add() {
        let t = Tensor::from_vec(shape(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.global_avg_pool().data(), &[2.5]);
        let other = Tensor::new_filled(shape(1, 1, 2, 2), 1.0);
        assert_eq!(t.add(&other).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        let wrong = Tensor::new_filled(shape(1, 1, 1, 4), 1.0);
        assert!(matches!(t.add(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn grid_support() {
        let mut g = Grid::zeros(5, 5);
        assert_eq!(g.support_extent(), None);
        g.data[6] = 1.0;
        g.data[18] = 2.0;
        assert_eq!(g.support_extent(), Some((3, 3)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_tensor(len: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-100.0f32..100.0, len)
        }

        proptest! {
            #[test]
            fn add_commutes_and_associates(a in small_tensor(12), b in small_tensor(12), c in small_tensor(12)) {
                let s = Shape::new(1, 3, 2, 2).unwrap();
                let ta = Tensor::from_vec(s, a).unwrap();
                let tb = Tensor::from_vec(s, b).unwrap();
                let tc = Tensor::from_vec(s, c).unwrap();
                prop_assert_eq!(ta.add(&tb).unwrap(), tb.add(&ta).unwrap());
                let l = ta.add(&tb).unwrap().add(&tc).unwrap();
                let r = ta.add(&tb.add(&tc).unwrap()).unwrap();
                // Each order rounds twice; the error scales with the operands.
                for i in 0..l.len() {
                    let mag = ta.data()[i].abs() + tb.data()[i].abs() + tc.data()[i].abs();
                    prop_assert!((l.data()[i] - r.data()[i]).abs() <= 2.0 * f32::EPSILON * mag);
                }
            }

            #[test]
            fn gelu_bounded_and_monotone(start in -8.0f32..8.0) {
                let xs: Vec<f32> = (0..64).map(|i| start + i as f32 * 0.05).collect();
                for &x in &xs {
                    let g = gelu(x);
                    prop_assert!(g > x.min(0.0) - 0.2 && g < x.max(0.0) + 0.2);
                }
                // GELU dips slightly below zero on (-inf, -0.75); monotone on the right branch.
                for pair in xs.windows(2).filter(|p| p[0] >= -0.75) {
                    prop_assert!(gelu(pair[1]) >= gelu(pair[0]));
                }
            }
        }
    }
}
