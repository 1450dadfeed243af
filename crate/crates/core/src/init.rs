use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Weight and bias of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Registers `{prefix}.w` with fan-in scaled uniform values
/// (`±sqrt(6 / fan_in)`) and a zero `{prefix}.b`.
pub(crate) fn conv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> Result<ConvParams> {
    scaled_conv_params(store, prefix, out_channels, in_channels, kernel, 1.0, rng)
}

/// As [`conv_params`] with the weight bound multiplied by `gain`.
pub(crate) fn scaled_conv_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    gain: Real,
    rng: &mut R,
) -> Result<ConvParams> {
    let shape = [out_channels, in_channels, kernel, kernel];
    let w = fan_in_uniform(&shape, in_channels * kernel * kernel, rng).map(|v| v * gain);
    let weight = store.register(format!("{prefix}.w"), w)?;
    let bias = store.register(format!("{prefix}.b"), Tensor::zeros(&[out_channels]))?;
    Ok(ConvParams { weight, bias })
}

pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as Real);
    Tensor::uniform(shape, -bound, bound, rng)
}
