//! U-Net encoder / decoder pair producing a real-valued mask.

use crate::error::{Error, Result};
use crate::model::config::{MaskActivation, ModelConfig};
use crate::model::{BnIds, Ctx, Init};
use crate::numerics::{LayerSpec, ParamId, Var};

/// Convolution (no bias; the following batch norm absorbs it) plus batch
/// norm.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bn: BnIds,
}

/// Encoder blocks and their mirrored decoder blocks. `decoder[i]` inverts
/// `encoder[i]`: its transposed convolution maps `out_channels` back to
/// `in_channels`.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub encoder: Vec<ConvBlock>,
    pub decoder: Vec<ConvBlock>,
}

impl AutoEncoder {
    pub(crate) fn new(init: &mut Init, prefix: &str, layers: &[LayerSpec]) -> Self {
        let mut encoder = Vec::new();
        let mut decoder = Vec::new();
        for (i, spec) in layers.iter().enumerate() {
            let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
            encoder.push(ConvBlock {
                spec: spec.clone(),
                weight: init.fan_in(&format!("{prefix}.enc{i}.weight"), spec.weight_shape(), fan_in),
                bn: init.batchnorm(&format!("{prefix}.enc{i}.bn"), spec.out_channels),
            });
        }
        for (i, spec) in layers.iter().enumerate() {
            let fan_in = spec.out_channels * spec.kernel.0 * spec.kernel.1;
            decoder.push(ConvBlock {
                spec: spec.clone(),
                weight: init.fan_in(&format!("{prefix}.dec{i}.weight"), spec.weight_shape(), fan_in),
                bn: init.batchnorm(&format!("{prefix}.dec{i}.bn"), spec.in_channels),
            });
        }
        Self { encoder, decoder }
    }
}

/// Conv → batch norm → LeakyReLU for every encoder block. Returns the
/// latent and each block's output (the last skip is the latent itself).
pub fn encode(ctx: &Ctx, ae: &AutoEncoder, mag: &Var, slope: f64) -> Result<(Var, Vec<Var>)> {
    let first = &ae.encoder[0].spec;
    if mag.shape().len() != 3 || mag.shape()[0] != first.in_channels {
        return Err(Error::shape(
            "encode",
            format!("input {:?} for {} channels", mag.shape(), first.in_channels),
        ));
    }
    let g = ctx.g;
    let mut x = mag.clone();
    let mut skips = Vec::with_capacity(ae.encoder.len());
    for block in &ae.encoder {
        let y = g.conv2d(&x, &ctx.p(block.weight), None, block.spec.stride)?;
        let y = ctx.batchnorm(&y, &block.bn)?;
        x = g.leaky_relu(&y, slope);
        skips.push(x.clone());
    }
    Ok((x, skips))
}

/// Mirrors [`encode`] deepest-first. Each block adds the matching skip to
/// its input, applies the transposed convolution cropped to the encoder
/// shape at that depth, batch norm and LeakyReLU; the outermost block ends
/// in the mask activation instead.
pub fn decode(
    ctx: &Ctx,
    ae: &AutoEncoder,
    latent: &Var,
    skips: &[Var],
    input_shape: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    if skips.len() != ae.decoder.len() {
        return Err(Error::shape("decode", format!("{} skips for {} blocks", skips.len(), ae.decoder.len())));
    }
    let g = ctx.g;
    let mut h = latent.clone();
    for i in (0..ae.decoder.len()).rev() {
        let block = &ae.decoder[i];
        if h.shape() != skips[i].shape() {
            return Err(Error::shape(
                "decode",
                format!("block {i} input {:?} does not match skip {:?}", h.shape(), skips[i].shape()),
            ));
        }
        let x = g.add(&h, &skips[i]);
        let target = if i == 0 { input_shape } else { skips[i - 1].shape() };
        let y = g.conv_transpose2d(&x, &ctx.p(block.weight), None, block.spec.stride, (target[1], target[2]))?;
        let y = ctx.batchnorm(&y, &block.bn)?;
        h = if i > 0 {
            g.leaky_relu(&y, cfg.leaky_slope)
        } else {
            match cfg.mask_activation {
                MaskActivation::Sigmoid => g.sigmoid(&y),
                MaskActivation::Linear => y,
            }
        };
    }
    Ok(h)
}
