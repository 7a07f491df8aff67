//! Exact weight algebra for deploy-time conversion: BN folding, merging a
//! parallel small-kernel branch into a large kernel, dilated-kernel
//! densification, and kernel aggregation for visualization.

use crate::conv::ConvWeights;
use crate::error::{Error, Result};
use crate::tensor::{Grid, Shape, Tensor};

pub const DEFAULT_BN_EPS: f32 = 1e-5;

/// Inference-mode batch normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn new(gamma: Vec<f32>, beta: Vec<f32>, mean: Vec<f32>, var: Vec<f32>, eps: f32) -> Result<Self> {
        let bn = BnParams {
            gamma,
            beta,
            mean,
            var,
            eps,
        };
        bn.validate()?;
        Ok(bn)
    }

    /// Parameters for which `bn(x) == x` (up to rounding of `var + eps`).
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - DEFAULT_BN_EPS; channels],
            eps: DEFAULT_BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::shape("BN vectors have different lengths"));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::param(format!("BN eps must be non-negative, got {}", self.eps)));
        }
        if let Some(v) = self.var.iter().find(|&&v| v.is_nan() || v < 0.0) {
            return Err(Error::param(format!("BN variance must be non-negative, got {v}")));
        }
        if self.var.iter().any(|&v| v + self.eps <= 0.0) {
            return Err(Error::param("BN var + eps must be positive"));
        }
        Ok(())
    }

    /// Per-channel `gamma / sqrt(var + eps)`.
    pub fn scale(&self) -> Vec<f32> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect()
    }

    /// Per-channel `beta - mean * scale`.
    pub fn shift(&self) -> Vec<f32> {
        self.scale()
            .iter()
            .zip(self.beta.iter().zip(&self.mean))
            .map(|(&s, (&b, &m))| b - m * s)
            .collect()
    }

    /// Applies the normalization to every channel plane of `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::shape(format!(
                "BN over {} channels applied to {s}",
                self.channels()
            )));
        }
        let scale = self.scale();
        let mut out = x.clone();
        let plane = s.plane();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            let (g, m, b) = (scale[c], self.mean[c], self.beta[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * g + b);
        }
        Ok(out)
    }
}

/// A single conv with folded bias: what a conv-BN pair becomes at deploy time.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKernel {
    pub weight: Tensor,
    pub bias: Vec<f32>,
}

impl FusedKernel {
    pub fn into_conv_weights(self) -> ConvWeights {
        ConvWeights {
            weight: self.weight,
            bias: Some(self.bias),
        }
    }
}

/// Folds `bn` into the preceding convolution.
pub fn fuse_bn(w: &ConvWeights, bn: &BnParams) -> Result<FusedKernel> {
    bn.validate()?;
    let ws = w.weight.shape();
    if ws.n != bn.channels() {
        return Err(Error::shape(format!(
            "conv has {} output channels, BN has {}",
            ws.n,
            bn.channels()
        )));
    }
    let scale = bn.scale();
    let per_out = ws.c * ws.h * ws.w;
    let mut weight = w.weight.clone();
    for (o, chunk) in weight.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[o]);
    }
    let bias = (0..ws.n)
        .map(|o| bn.beta[o] - bn.mean[o] * scale[o] + scale[o] * w.bias_or_zero(o))
        .collect();
    Ok(FusedKernel { weight, bias })
}

/// A large depth-wise (or dense) kernel with an optional parallel
/// small-kernel branch; each branch has its own BN and the outputs are summed.
#[derive(Debug, Clone)]
pub struct BranchedConv {
    pub large: (ConvWeights, BnParams),
    pub small: Option<(ConvWeights, BnParams)>,
}

/// Zero-pads a `k x k` kernel block to `big x big`, centered.
pub fn pad_kernel(w: &Tensor, big: usize) -> Result<Tensor> {
    let s = w.shape();
    let k = s.h;
    if s.h != s.w || k > big || !(big - k).is_multiple_of(2) {
        return Err(Error::shape(format!(
            "cannot center a {}x{} kernel inside {big}x{big}",
            s.h, s.w
        )));
    }
    let off = (big - k) / 2;
    let mut out = Tensor::zeros(Shape { h: big, w: big, ..s });
    for o in 0..s.n {
        for c in 0..s.c {
            for y in 0..k {
                for x in 0..k {
                    out.set(o, c, y + off, x + off, w.at(o, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Folds both BNs and adds the centered small kernel onto the large one.
pub fn merge_branches(b: &BranchedConv) -> Result<FusedKernel> {
    let large = fuse_bn(&b.large.0, &b.large.1)?;
    let Some((small_w, small_bn)) = &b.small else {
        return Ok(large);
    };
    let (ls, ss) = (large.weight.shape(), small_w.weight.shape());
    if ls.n != ss.n || ls.c != ss.c {
        return Err(Error::shape(format!("branch channel layouts differ: {ls} vs {ss}")));
    }
    if ls.h % 2 == 0 || ss.h % 2 == 0 {
        return Err(Error::shape("branch kernels must have odd size"));
    }
    let small = fuse_bn(small_w, small_bn)?;
    let padded = pad_kernel(&small.weight, ls.h)?;
    let weight = large.weight.add(&padded)?;
    let bias = large.bias.iter().zip(&small.bias).map(|(a, b)| a + b).collect();
    Ok(FusedKernel { weight, bias })
}

/// Inserts `dilation - 1` zeros between neighbouring taps, giving the dense
/// `(k - 1) * d + 1` kernel that computes the same correlation at dilation 1.
pub fn densify_dilated(w: &ConvWeights, dilation: usize) -> Result<ConvWeights> {
    if dilation == 0 {
        return Err(Error::param("dilation must be positive"));
    }
    let s = w.weight.shape();
    if s.h != s.w {
        return Err(Error::shape("kernel must be square"));
    }
    let k = s.h;
    let big = (k - 1) * dilation + 1;
    let mut out = Tensor::zeros(Shape { h: big, w: big, ..s });
    for o in 0..s.n {
        for c in 0..s.c {
            for y in 0..k {
                for x in 0..k {
                    out.set(o, c, y * dilation, x * dilation, w.weight.at(o, c, y, x));
                }
            }
        }
    }
    Ok(ConvWeights {
        weight: out,
        bias: w.bias.clone(),
    })
}

/// `sum_c |w[c, 0]|`, rescaled so the largest entry is 1. An all-zero kernel
/// yields an all-zero matrix.
pub fn aggregate_kernel(w: &ConvWeights) -> Result<Grid> {
    let s = w.weight.shape();
    if s.c != 1 {
        return Err(Error::shape(format!(
            "aggregation expects depth-wise weights (out, 1, k, k), got {s}"
        )));
    }
    let mut grid = Grid::zeros(s.h, s.w);
    for c in 0..s.n {
        for (acc, v) in grid.data.iter_mut().zip(w.weight.plane(c, 0)) {
            *acc += v.abs();
        }
    }
    let max = grid.max();
    if max > 0.0 {
        grid.data.iter_mut().for_each(|v| *v /= max);
    }
    Ok(grid)
}
