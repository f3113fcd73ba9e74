use crate::autodiff::{Conv2dSpec, Var};
use crate::error::Result;
use crate::scalar::Scalar;

use super::params::{Bound, Init, ParamId, ParamRegistry};

/// Convolution layer with an `(out, in/groups, k, k)` kernel and a bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Result<Self> {
        let per_group = in_channels / spec.groups.max(1);
        let fan_in = per_group * kernel * kernel;
        Ok(Conv2d {
            weight: reg.register(
                &format!("{name}.weight"),
                &[out_channels, per_group, kernel, kernel],
                Init::KaimingUniform { fan_in },
            )?,
            bias: reg.register(&format!("{name}.bias"), &[out_channels], Init::Constant(0.0))?,
            spec,
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> usize {
        out_channels * (in_channels / groups) * kernel * kernel + out_channels
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p.get(self.weight), Some(p.get(self.bias)), self.spec)
    }
}

/// Transposed convolution layer with an `(in, out, k, k)` kernel and a bias.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Fan-in counts the input taps reaching one output pixel,
    /// `in * ceil(k / stride)^2`.
    pub fn new<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let taps = kernel.div_ceil(stride);
        Ok(ConvTranspose2d {
            weight: reg.register(
                &format!("{name}.weight"),
                &[in_channels, out_channels, kernel, kernel],
                Init::KaimingUniform {
                    fan_in: in_channels * taps * taps,
                },
            )?,
            bias: reg.register(&format!("{name}.bias"), &[out_channels], Init::Constant(0.0))?,
            stride,
        })
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        in_channels * out_channels * kernel * kernel + out_channels
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv_transpose2d(
            p.get(self.weight),
            Some(p.get(self.bias)),
            (self.stride, self.stride),
            (0, 0),
        )
    }
}
