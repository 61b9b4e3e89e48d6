use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

use super::{Builder, Conv, ConvNorm, Ctx, Linear, TransposeConv};

fn channels<T: Scalar>(x: &Var<'_, T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    x.value().dims4(op)
}

/// Densely connected stack of normalized 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<ConvNorm>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize, n: usize, growth: usize) -> Result<Self> {
        if n == 0 || growth == 0 {
            return Err(Error::Config("dense block needs n ≥ 1 and growth ≥ 1".into()));
        }
        let layers = (0..n)
            .map(|i| b.scope(&format!("layer{i}")).conv_norm(in_channels + i * growth, growth, 3))
            .collect::<Result<_>>()?;
        Ok(DenseBlock {
            layers,
            in_channels,
            growth,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let input = if feats.len() == 1 {
                x
            } else {
                Var::concat_channels(&feats)?
            };
            feats.push(layer.forward(cx, input)?);
        }
        Var::concat_channels(&feats)
    }
}

/// Normalized 1×1 convolution halving channels, then 2×2 average pooling.
#[derive(Clone, Debug)]
pub struct TransitionBlock {
    pub conv: ConvNorm,
}

impl TransitionBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, in_channels: usize) -> Result<Self> {
        if in_channels % 2 != 0 || in_channels == 0 {
            return Err(Error::Config(format!(
                "transition block needs an even channel count, got {in_channels}"
            )));
        }
        Ok(TransitionBlock {
            conv: b.scope("conv").conv_norm(in_channels, in_channels / 2, 1)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, c, _, _) = channels(&x, "transition_block")?;
        if c % 2 != 0 {
            return Err(Error::invalid_shape("transition_block", format!("odd channel count {c}")));
        }
        self.conv.forward(cx, x)?.avgpool2d(2, 2)
    }
}

/// `x + f(f(x))` with two normalized 3×3 convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: ConvNorm,
    pub second: ConvNorm,
}

impl ResidualBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Result<Self> {
        Ok(ResidualBlock {
            first: b.scope("conv1").conv_norm(channels, channels, 3)?,
            second: b.scope("conv2").conv_norm(channels, channels, 3)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let branch = self.second.forward(cx, self.first.forward(cx, x)?)?;
        x.add(branch)
    }
}

/// Channel attention: pooled descriptor through a `C → C/r → C` bottleneck.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
}

impl SqueezeExcitation {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels == 0 {
            return Err(Error::Config(format!(
                "squeeze-excitation needs channels divisible by r, got C={channels} r={reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(SqueezeExcitation {
            squeeze: b.scope("fc1").linear(channels, hidden)?,
            excite: b.scope("fc2").linear(hidden, channels)?,
            channels,
        })
    }

    /// Returns the rescaled input and the `N×C` channel scales.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let pooled = x.global_avg_pool()?;
        let hidden = self.squeeze.forward(cx, pooled)?.relu();
        let scales = self.excite.forward(cx, hidden)?.sigmoid();
        Ok((x.scale_channels(scales)?, scales))
    }
}

/// Gates shape features with an attention map computed from shape and
/// texture features together.
#[derive(Clone, Debug)]
pub struct GatedConvLayer {
    /// Texture features to one channel.
    pub reduce: Conv,
    /// Shape features plus the reduced texture channel to the gate logit.
    pub gate: Conv,
}

impl GatedConvLayer {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, shape_channels: usize, texture_channels: usize) -> Result<Self> {
        Ok(GatedConvLayer {
            reduce: b.scope("reduce").conv(texture_channels, 1, 1, 0, true)?,
            gate: b.scope("gate").conv(shape_channels + 1, 1, 1, 0, true)?,
        })
    }

    /// Returns the gated shape features and the `N×1×H×W` gate.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'_, 't, T>,
        shape: Var<'t, T>,
        texture: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (n, cs, h, w) = channels(&shape, "gated_conv_layer")?;
        let (nt, _, ht, wt) = channels(&texture, "gated_conv_layer")?;
        if n != nt || ht > h || wt > w {
            return Err(Error::shape("gated_conv_layer", &shape.shape(), &texture.shape()));
        }
        // The 1×1 reduction commutes with bilinear resampling, so the
        // single-channel map is the one that gets upsampled.
        let mut t = self.reduce.forward(cx, texture)?;
        if (ht, wt) != (h, w) {
            t = t.bilinear_upsample(h, w)?;
        }
        let logits = self.gate.forward(cx, Var::concat_channels(&[shape, t])?)?;
        let alpha = logits.sigmoid();
        let gated = shape.mul(alpha)?;
        debug_assert_eq!(gated.shape()[1], cs);
        Ok((gated, alpha))
    }
}

/// Per-pixel attention: normalized 1×1 to `C/2`, 1×1 to one channel, sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttentionPath {
    pub reduce: ConvNorm,
    pub project: Conv,
    pub channels: usize,
}

impl SpatialAttentionPath {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, channels: usize) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Config(format!(
                "spatial attention needs an even channel count, got {channels}"
            )));
        }
        Ok(SpatialAttentionPath {
            reduce: b.scope("reduce").conv_norm(channels, channels / 2, 1)?,
            project: b.scope("project").conv(channels / 2, 1, 1, 0, true)?,
            channels,
        })
    }

    /// Returns the map stacked to `C` channels and the raw `N×1×H×W` map.
    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let (_, c, _, _) = channels(&x, "spatial_attention_path")?;
        if c % 2 != 0 {
            return Err(Error::invalid_shape("spatial_attention_path", format!("odd channel count {c}")));
        }
        let raw = self.project.forward(cx, self.reduce.forward(cx, x)?)?.sigmoid();
        Ok((raw.stack_channels(c)?, raw))
    }
}

/// Decoder stage fusing spatial and channel attention as `(F_s + 1) ⊙ F_c`.
#[derive(Clone, Debug)]
pub struct DualAttentionDecoder {
    pub up: TransposeConv,
    pub conv: ConvNorm,
    pub se: SqueezeExcitation,
    pub spatial: SpatialAttentionPath,
    pub out_channels: usize,
}

/// Intermediate values of one decoder pass.
pub struct DecoderOutput<'t, T: Scalar> {
    pub features: Var<'t, T>,
    pub spatial_map: Var<'t, T>,
    pub channel_features: Var<'t, T>,
    pub channel_scales: Var<'t, T>,
}

impl DualAttentionDecoder {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        skip_channels: usize,
        below_channels: usize,
        out_channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        Ok(DualAttentionDecoder {
            up: b.scope("up").transpose_conv(below_channels, below_channels, 2, 2)?,
            conv: b.scope("conv").conv_norm(skip_channels + below_channels, out_channels, 3)?,
            se: SqueezeExcitation::build(&mut b.scope("se"), out_channels, reduction)?,
            spatial: SpatialAttentionPath::build(&mut b.scope("spatial"), out_channels)?,
            out_channels,
        })
    }

    pub fn forward_full<'t, T: Scalar>(
        &self,
        cx: &Ctx<'_, 't, T>,
        skip: Var<'t, T>,
        below: Var<'t, T>,
    ) -> Result<DecoderOutput<'t, T>> {
        let up = self.up.forward(cx, below)?;
        let (s, u) = (skip.shape(), up.shape());
        if s[0] != u[0] || s[2..] != u[2..] {
            return Err(Error::shape("dual_attention_decoder", &s, &u));
        }
        let x = self.conv.forward(cx, Var::concat_channels(&[skip, up])?)?;
        let (channel_features, channel_scales) = self.se.forward(cx, x)?;
        let (stacked, spatial_map) = self.spatial.forward(cx, x)?;
        let features = stacked.add_scalar(T::one()).mul(channel_features)?;
        Ok(DecoderOutput {
            features,
            spatial_map,
            channel_features,
            channel_scales,
        })
    }

    /// Returns the fused features and the raw spatial map.
    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'_, 't, T>,
        skip: Var<'t, T>,
        below: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = self.forward_full(cx, skip, below)?;
        Ok((out.features, out.spatial_map))
    }
}
