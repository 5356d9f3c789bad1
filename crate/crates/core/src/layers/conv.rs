use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamSink};
use crate::tensor::ops::Conv2dSpec;
use crate::tensor::{feature_dims, Var};

use super::linear::{LayerNorm, Linear};

/// Per-channel `K×K` convolution (stride 1, zero padding `K/2`), optionally
/// followed by a pointwise `1×1` mixing stage.
#[derive(Debug, Clone, Copy)]
pub struct DepthwiseConvParams {
    pub kernel: usize,
    pub channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub pointwise: Option<Linear>,
}

impl DepthwiseConvParams {
    pub fn new(sink: &mut impl ParamSink, name: &str, channels: usize, kernel: usize, pointwise: bool) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            kernel,
            channels,
            weight: sink.param(
                &format!("{name}.weight"),
                &[kernel, kernel, channels],
                Init::FanIn(kernel * kernel),
            ),
            bias: sink.param(&format!("{name}.bias"), &[channels], Init::Zeros),
            pointwise: pointwise.then(|| Linear::new(sink, &format!("{name}.pointwise"), channels, channels)),
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let y = x.depthwise_conv2d(p.get(self.weight), p.get(self.bias))?;
        match &self.pointwise {
            Some(pw) => pw.forward(&y, p),
            None => Ok(y),
        }
    }
}

/// Stride-2 `3×3` convolution doubling the channels, followed by layernorm.
#[derive(Debug, Clone, Copy)]
pub struct Downsample {
    pub in_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
}

impl Downsample {
    pub const SPEC: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };

    pub fn new(sink: &mut impl ParamSink, name: &str, in_dim: usize) -> Self {
        let out = 2 * in_dim;
        Self {
            in_dim,
            weight: sink.param(&format!("{name}.weight"), &[3, 3, in_dim, out], Init::FanIn(9 * in_dim)),
            bias: sink.param(&format!("{name}.bias"), &[out], Init::Zeros),
            norm: LayerNorm::new(sink, &format!("{name}.norm"), out),
        }
    }

    /// The convolution alone, without the trailing norm.
    pub fn project<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (_, h, w, _) = feature_dims(x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "downsample",
                format!("spatial extents {h}x{w} must be even"),
            ));
        }
        x.conv2d(p.get(self.weight), p.get(self.bias), Self::SPEC)
    }

    pub fn forward<'t>(&self, x: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        self.norm.forward(&self.project(x, p)?, p)
    }
}

/// Non-overlapping `4×4` patch projection of an RGB image, then layernorm.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub const PATCH: usize = 4;
    pub const IN_CHANNELS: usize = 3;
    pub const SPEC: Conv2dSpec = Conv2dSpec { stride: 4, padding: 0 };

    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize) -> Self {
        let (k, ci) = (Self::PATCH, Self::IN_CHANNELS);
        Self {
            dim,
            weight: sink.param(&format!("{name}.weight"), &[k, k, ci, dim], Init::FanIn(k * k * ci)),
            bias: sink.param(&format!("{name}.bias"), &[dim], Init::Zeros),
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
        }
    }

    pub fn project<'t>(&self, image: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (_, h, w, c) = feature_dims(image.shape())?;
        if h % Self::PATCH != 0 || w % Self::PATCH != 0 || c != Self::IN_CHANNELS {
            return Err(Error::invalid(
                "patch_embed",
                format!("image {h}x{w}x{c} must be RGB with sides divisible by {}", Self::PATCH),
            ));
        }
        image.conv2d(p.get(self.weight), p.get(self.bias), Self::SPEC)
    }

    pub fn forward<'t>(&self, image: &Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        self.norm.forward(&self.project(image, p)?, p)
    }
}
