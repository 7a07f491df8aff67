//! 2-D convolution: geometry, weights and the interchangeable forward backends.
//!
//! All backends compute cross-correlation (no kernel flip) with zero padding,
//! matching the usual deep-learning definition
//!
//! ```text
//! y[n, o, i, j] = b[o] + sum_{c in group(o), u, v} x[n, c, i*s - p + u*d, j*s - p + v*d] * w[o, c', u, v]
//! ```

mod blocked;
mod direct;
mod fft;
mod vjp;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dist, Rng, Shape, Tensor};

pub use blocked::{conv2d_blocked, conv2d_blocked_with_tile, DEFAULT_TILE};
pub use direct::conv2d_direct;
pub use fft::conv2d_fft;
pub use vjp::conv2d_vjp_input;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Dense convolution with explicit padding.
    pub fn dense(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
        .validated()
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::dense(in_channels, out_channels, 1, 1, 0)
    }

    /// Depth-wise convolution with "same" padding `d * (k - 1) / 2`.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize, dilation: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::param(format!("same padding needs an odd kernel, got {kernel}")));
        }
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: channels,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            groups,
            ..
        } = self;
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::param(format!(
                "kernel size must be odd and positive, got {kernel}"
            )));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::param(format!("stride must be 1 or 2, got {stride}")));
        }
        if dilation == 0 {
            return Err(Error::param("dilation must be positive"));
        }
        if in_channels == 0 || out_channels == 0 || groups == 0 {
            return Err(Error::param("channel and group counts must be positive"));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::param(format!(
                "groups {groups} must divide in_channels {in_channels} and out_channels {out_channels}"
            )));
        }
        Ok(self)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// `(k - 1) * d + 1`
    pub fn effective_kernel(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: self.in_per_group(),
            h: self.kernel,
            w: self.kernel,
        }
    }

    /// Output extent along one axis, or an error if the window does not fit.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        let ext = self.effective_kernel();
        if ext > padded {
            return Err(Error::shape(format!(
                "effective kernel {ext} exceeds padded input {padded}"
            )));
        }
        Ok((padded - ext) / self.stride + 1)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, conv expects {}",
                input.c, self.in_channels
            )));
        }
        Ok(Shape {
            n: input.n,
            c: self.out_channels,
            h: self.output_extent(input.h)?,
            w: self.output_extent(input.w)?,
        })
    }

    /// Number of weights, plus `out_channels` when `bias` is set.
    pub fn params(&self, bias: bool) -> u64 {
        let w = (self.out_channels * self.in_per_group() * self.kernel * self.kernel) as u64;
        w + if bias { self.out_channels as u64 } else { 0 }
    }

    /// Multiply-accumulate count for one forward pass.
    pub fn macs(&self, out_h: usize, out_w: usize, batch: usize) -> u64 {
        self.params(false) * (out_h * out_w * batch) as u64
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conv {}->{} k{} s{} p{} d{} g{}",
            self.in_channels, self.out_channels, self.kernel, self.stride, self.padding, self.dilation, self.groups
        )
    }
}

/// Parameter count of a convolution (no bias).
pub fn params_of(spec: &ConvSpec) -> u64 {
    spec.params(false)
}

/// Compute of a convolution in multiply-accumulates, the unit the "FLOPs"
/// columns of the usual model tables are quoted in.
pub fn flops_of(spec: &ConvSpec, out_h: usize, out_w: usize, batch: usize) -> u64 {
    spec.macs(out_h, out_w, batch)
}

/// Kernel block `(out, in / groups, k, k)` and optional per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvWeights {
    pub fn new(weight: Tensor, bias: Option<Vec<f32>>) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w {
            return Err(Error::shape(format!("kernel must be square, got {s}")));
        }
        if let Some(b) = &bias {
            if b.len() != s.n {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    s.n
                )));
            }
        }
        Ok(ConvWeights { weight, bias })
    }

    pub fn random(spec: &ConvSpec, rng: &mut Rng, dist: Dist) -> Result<Self> {
        Ok(ConvWeights {
            weight: Tensor::new_random(spec.weight_shape(), rng, dist)?,
            bias: None,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn bias_or_zero(&self, o: usize) -> f32 {
        self.bias.as_ref().map_or(0.0, |b| b[o])
    }

    pub(crate) fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.weight.shape() != spec.weight_shape() {
            return Err(Error::shape(format!(
                "weights {} do not match {spec} (expected {})",
                self.weight.shape(),
                spec.weight_shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != spec.out_channels {
                return Err(Error::shape("bias length mismatch"));
            }
        }
        Ok(())
    }
}

/// Forward convolution backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Direct,
    Blocked,
    Fft,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Direct, Backend::Blocked, Backend::Fft];

    pub fn id(&self) -> &'static str {
        match self {
            Backend::Direct => "direct",
            Backend::Blocked => "blocked",
            Backend::Fft => "fft",
        }
    }

    pub fn conv2d(&self, x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
        match self {
            Backend::Direct => conv2d_direct(x, w, spec),
            Backend::Blocked => conv2d_blocked(x, w, spec),
            Backend::Fft => conv2d_fft(x, w, spec),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Backend::Direct),
            "blocked" => Ok(Backend::Blocked),
            "fft" => Ok(Backend::Fft),
            other => Err(Error::param(format!("unknown backend `{other}`"))),
        }
    }
}

/// Shared argument checking for every backend; returns the output shape.
pub(crate) fn prepare(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Shape> {
    let spec = spec.validated()?;
    w.check(&spec)?;
    spec.output_shape(x.shape())
}
