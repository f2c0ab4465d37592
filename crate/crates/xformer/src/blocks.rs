//! Composite building blocks: the spatial and channel transformer blocks,
//! the two feed-forward variants, the bidirectional connection unit, the
//! level-transition resampling units, and the skip-connection fusion.

use crate::attention::{c_msa, w_msa, ChannelAttentionParams, WindowAttentionParams};
use crate::error::{Result, XError};
use crate::tensor::conv::ConvKernel;
use crate::tensor::shape::{crop2d, reflect_pad2d, reshape, slice_channels};
use crate::tensor::{ops, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-position channel normalization parameters; `beta: None` is the
/// bias-free form used inside channel blocks.
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Option<Tensor<T>>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, self.beta.as_ref(), LAYER_NORM_EPS)
    }
}

/// Feed-forward network: either the plain two-layer MLP with GELU, or the
/// gated depthwise-conv variant.
pub enum FfnParams<T: Scalar> {
    Mlp {
        fc1_weight: Tensor<T>,
        fc1_bias: Tensor<T>,
        fc2_weight: Tensor<T>,
        fc2_bias: Tensor<T>,
    },
    GatedDconv {
        /// 1x1 expansion to twice the hidden width.
        expand: ConvKernel<T>,
        /// 3x3 depthwise over both halves.
        dwconv: ConvKernel<T>,
        /// 1x1 projection back to the block width.
        project: ConvKernel<T>,
    },
}

/// Hidden width used by both FFN variants.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    ((channels as f64 * expansion).floor() as usize).max(1)
}

pub fn ffn_forward<T: Scalar>(x: &Tensor<T>, ffn: &FfnParams<T>) -> Result<Tensor<T>> {
    match ffn {
        FfnParams::Mlp {
            fc1_weight,
            fc1_bias,
            fc2_weight,
            fc2_bias,
        } => {
            let (h, w, c) = dims3(x)?;
            let flat = reshape(x, &[h * w, c])?;
            let hidden = ops::add_bias_last(&ops::matmul(&flat, fc1_weight)?, fc1_bias)?;
            let hidden = ops::gelu(&hidden);
            let out = ops::add_bias_last(&ops::matmul(&hidden, fc2_weight)?, fc2_bias)?;
            reshape(&out, &[h, w, c])
        }
        FfnParams::GatedDconv {
            expand,
            dwconv,
            project,
        } => {
            let wide = dwconv.apply(&expand.apply(x)?)?;
            let m = wide.shape()[2] / 2;
            let gate = ops::gelu(&slice_channels(&wide, 0, m)?);
            let value = slice_channels(&wide, m, m)?;
            project.apply(&ops::mul(&gate, &value)?)
        }
    }
}

/// Spatial transformer block parameters (pre-norm attention + pre-norm MLP).
pub struct StbParams<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub attn: WindowAttentionParams<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

/// Channel transformer block parameters (bias-free norms).
pub struct CtbParams<T: Scalar> {
    pub norm1: LayerNormParams<T>,
    pub attn: ChannelAttentionParams<T>,
    pub norm2: LayerNormParams<T>,
    pub ffn: FfnParams<T>,
}

fn dims3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(XError::Dim(format!("expected [H, W, C], got {s:?}"))),
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// `x' = W-MSA(LN(x)) + x; out = FFN(LN(x')) + x'`. Inputs whose extents are
/// not window multiples are reflect-padded around the attention and cropped
/// back.
pub fn stb_forward<T: Scalar>(x: &Tensor<T>, p: &StbParams<T>) -> Result<Tensor<T>> {
    let (h, w, _c) = dims3(x)?;
    let g = p.attn.window;
    let (hp, wp) = (round_up(h, g), round_up(w, g));
    let normed = p.norm1.apply(x)?;
    let attended = if hp != h || wp != w {
        let padded = reflect_pad2d(&normed, 0, hp - h, 0, wp - w)?;
        crop2d(&w_msa(&padded, &p.attn)?, 0, 0, h, w)?
    } else {
        w_msa(&normed, &p.attn)?
    };
    let x1 = ops::add(&attended, x)?;
    let f = ffn_forward(&p.norm2.apply(&x1)?, &p.ffn)?;
    ops::add(&f, &x1)
}

/// As [`stb_forward`] with channel attention; no padding is needed.
pub fn ctb_forward<T: Scalar>(x: &Tensor<T>, p: &CtbParams<T>) -> Result<Tensor<T>> {
    let attended = c_msa(&p.norm1.apply(x)?, &p.attn)?;
    let x1 = ops::add(&attended, x)?;
    let f = ffn_forward(&p.norm2.apply(&x1)?, &p.ffn)?;
    ops::add(&f, &x1)
}

/// Bidirectional connection unit. Both refinements read the pre-exchange
/// inputs: `f_s' = f_s + conv3x3(f_c)` and `f_c' = f_c + dwconv3x3(f_s)`.
/// Either direction may be absent (the single-direction ablations).
pub struct BcuParams<T: Scalar> {
    /// 3x3 depthwise refinement of the spatial features, added to the
    /// channel branch.
    pub spatial_to_channel: Option<ConvKernel<T>>,
    /// 3x3 standard refinement of the channel features, added to the
    /// spatial branch.
    pub channel_to_spatial: Option<ConvKernel<T>>,
}

pub fn bcu_exchange<T: Scalar>(
    f_s: &Tensor<T>,
    f_c: &Tensor<T>,
    p: &BcuParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if f_s.shape() != f_c.shape() {
        return Err(XError::Dim(format!(
            "bcu_exchange: branch shapes {:?} and {:?} differ",
            f_s.shape(),
            f_c.shape()
        )));
    }
    let s_out = match &p.channel_to_spatial {
        Some(k) => ops::add(f_s, &k.apply(f_c)?)?,
        None => f_s.clone(),
    };
    let c_out = match &p.spatial_to_channel {
        Some(k) => ops::add(f_c, &k.apply(f_s)?)?,
        None => f_c.clone(),
    };
    Ok((s_out, c_out))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ResampleDirection {
    Down,
    Up,
}

/// Level transition: a bias-free 3x3 conv adjusting channels, then a pixel
/// shuffle. Down halves the resolution and doubles the channels; up is the
/// reverse.
pub struct ResampleParams<T: Scalar> {
    pub direction: ResampleDirection,
    pub conv: ConvKernel<T>,
}

pub fn downsample<T: Scalar>(x: &Tensor<T>, p: &ResampleParams<T>) -> Result<Tensor<T>> {
    debug_assert_eq!(p.direction, ResampleDirection::Down);
    let (h, w, _c) = dims3(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(XError::Dim(format!(
            "downsample requires even extents, got {:?}",
            x.shape()
        )));
    }
    crate::tensor::shape::pixel_unshuffle(&p.conv.apply(x)?, 2)
}

pub fn upsample<T: Scalar>(x: &Tensor<T>, p: &ResampleParams<T>) -> Result<Tensor<T>> {
    debug_assert_eq!(p.direction, ResampleDirection::Up);
    crate::tensor::shape::pixel_shuffle(&p.conv.apply(x)?, 2)
}

/// Fuses a decoder feature with its encoder skip: channel concat at `2C`,
/// then a 1x1 reduction back to `C`.
pub fn skip_fuse<T: Scalar>(
    dec: &Tensor<T>,
    enc: &Tensor<T>,
    reduce: &ConvKernel<T>,
) -> Result<Tensor<T>> {
    reduce.apply(&ops::concat_last(dec, enc)?)
}
