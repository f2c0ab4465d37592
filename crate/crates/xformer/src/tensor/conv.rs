//! 2-D convolution (cross-correlation convention, zero padding) over
//! channel-last tensors, with full reverse-mode support for input, weight,
//! and bias.

use rayon::prelude::*;

use super::{Node, ParentGrads, Scalar, Tensor};
use crate::error::{Result, XError};

/// Convolution parameters: weight `[out_ch, in_ch/groups, kH, kW]` plus an
/// optional `[out_ch]` bias. Depthwise convolution is the special case
/// `groups == in_ch == out_ch`.
#[derive(Clone)]
pub struct ConvKernel<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [oc, _icg, _kh, _kw] = match weight.shape() {
            [a, b, c, d] => [*a, *b, *c, *d],
            s => {
                return Err(XError::Dim(format!(
                    "conv weight must be [out_ch, in_ch/groups, kH, kW], got {s:?}"
                )))
            }
        };
        if groups == 0 || stride == 0 {
            return Err(XError::Config(
                "conv stride and groups must be positive".into(),
            ));
        }
        if oc % groups != 0 {
            return Err(XError::Config(format!(
                "out_ch {oc} not divisible by groups {groups}"
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [oc] {
                return Err(XError::Dim(format!(
                    "conv bias shape {:?} does not match out_ch {oc}",
                    b.shape()
                )));
            }
        }
        Ok(ConvKernel {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self)
    }
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    oc: usize,
    icg: usize,
    ocg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<ConvDims> {
    let (h, w, cin) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => {
            return Err(XError::Dim(format!(
                "conv2d input must be [H, W, C], got {s:?}"
            )))
        }
    };
    let (oc, icg, kh, kw) = match k.weight.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        _ => unreachable!("validated at construction"),
    };
    if cin % k.groups != 0 {
        return Err(XError::Config(format!(
            "in_ch {cin} not divisible by groups {}",
            k.groups
        )));
    }
    if cin / k.groups != icg {
        return Err(XError::Dim(format!(
            "conv2d channel mismatch: input {:?} vs weight {:?} with groups {}",
            x.shape(),
            k.weight.shape(),
            k.groups
        )));
    }
    if h + 2 * k.padding < kh || w + 2 * k.padding < kw {
        return Err(XError::Dim(format!(
            "conv2d spatial extents {:?} too small for kernel {:?} with padding {}",
            x.shape(),
            k.weight.shape(),
            k.padding
        )));
    }
    Ok(ConvDims {
        h,
        w,
        cin,
        oc,
        icg,
        ocg: oc / k.groups,
        kh,
        kw,
        oh: (h + 2 * k.padding - kh) / k.stride + 1,
        ow: (w + 2 * k.padding - kw) / k.stride + 1,
        stride: k.stride,
        pad: k.padding,
    })
}

fn conv_forward<T: Scalar>(xd: &[T], wd: &[T], bd: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.oh * d.ow * d.oc];
    out.par_chunks_mut(d.ow * d.oc)
        .enumerate()
        .for_each(|(oy, row)| {
            for ox in 0..d.ow {
                for oc in 0..d.oc {
                    let gidx = oc / d.ocg;
                    let mut acc = match bd {
                        Some(b) => b[oc],
                        None => T::zero(),
                    };
                    for ky in 0..d.kh {
                        let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let xbase = ((iy as usize * d.w) + ix as usize) * d.cin;
                            let wbase = ((oc * d.icg) * d.kh + ky) * d.kw + kx;
                            for icg in 0..d.icg {
                                let ic = gidx * d.icg + icg;
                                acc += xd[xbase + ic] * wd[wbase + icg * d.kh * d.kw];
                            }
                        }
                    }
                    row[ox * d.oc + oc] = acc;
                }
            }
        });
    out
}

fn conv_grad_input<T: Scalar>(g: &[T], wd: &[T], d: &ConvDims) -> Vec<T> {
    let mut dx = vec![T::zero(); d.h * d.w * d.cin];
    dx.par_chunks_mut(d.w * d.cin)
        .enumerate()
        .for_each(|(iy, row)| {
            for ix in 0..d.w {
                for ic in 0..d.cin {
                    let gidx = ic / d.icg;
                    let icg = ic % d.icg;
                    let mut acc = T::zero();
                    for ky in 0..d.kh {
                        let oy_num = iy as isize + d.pad as isize - ky as isize;
                        if oy_num < 0 || oy_num % d.stride as isize != 0 {
                            continue;
                        }
                        let oy = (oy_num / d.stride as isize) as usize;
                        if oy >= d.oh {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ox_num = ix as isize + d.pad as isize - kx as isize;
                            if ox_num < 0 || ox_num % d.stride as isize != 0 {
                                continue;
                            }
                            let ox = (ox_num / d.stride as isize) as usize;
                            if ox >= d.ow {
                                continue;
                            }
                            let gbase = (oy * d.ow + ox) * d.oc;
                            for ocg in 0..d.ocg {
                                let oc = gidx * d.ocg + ocg;
                                let widx = ((oc * d.icg + icg) * d.kh + ky) * d.kw + kx;
                                acc += g[gbase + oc] * wd[widx];
                            }
                        }
                    }
                    row[ix * d.cin + ic] = acc;
                }
            }
        });
    dx
}

fn conv_grad_weight<T: Scalar>(g: &[T], xd: &[T], d: &ConvDims) -> Vec<T> {
    let mut dw = vec![T::zero(); d.oc * d.icg * d.kh * d.kw];
    dw.par_chunks_mut(d.icg * d.kh * d.kw)
        .enumerate()
        .for_each(|(oc, wslice)| {
            let gidx = oc / d.ocg;
            for icg in 0..d.icg {
                let ic = gidx * d.icg + icg;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = T::zero();
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for ox in 0..d.ow {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc += g[(oy * d.ow + ox) * d.oc + oc]
                                    * xd[((iy as usize * d.w) + ix as usize) * d.cin + ic];
                            }
                        }
                        wslice[(icg * d.kh + ky) * d.kw + kx] = acc;
                    }
                }
            }
        });
    dw
}

fn conv_grad_bias<T: Scalar>(g: &[T], d: &ConvDims) -> Vec<T> {
    let mut db = vec![T::zero(); d.oc];
    for pos in 0..d.oh * d.ow {
        for (oc, acc) in db.iter_mut().enumerate() {
            *acc += g[pos * d.oc + oc];
        }
    }
    db
}

/// Convolution of a `[H, W, Cin]` tensor, producing `[H', W', Cout]` with
/// `H' = (H + 2 pad - kH) / stride + 1`. Differentiable in the input, the
/// weight, and the bias.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    let d = conv_dims(x, k)?;
    let out = x.with_data(|xd| {
        k.weight.with_data(|wd| match &k.bias {
            Some(b) => b.with_data(|bd| conv_forward(xd, wd, Some(bd), &d)),
            None => conv_forward(xd, wd, None, &d),
        })
    });
    let mut parents = vec![x.clone(), k.weight.clone()];
    let has_bias = k.bias.is_some();
    if let Some(b) = &k.bias {
        parents.push(b.clone());
    }
    let shape = vec![d.oh, d.ow, d.oc];
    Ok(Tensor::new_op(
        shape,
        out,
        parents,
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            let dx = if node.parent_tracks(0) {
                Some(node.parent(1).with_data(|wd| conv_grad_input(g, wd, &d)))
            } else {
                None
            };
            let dw = if node.parent_tracks(1) {
                Some(node.parent(0).with_data(|xd| conv_grad_weight(g, xd, &d)))
            } else {
                None
            };
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(if node.parent_tracks(2) {
                    Some(conv_grad_bias(g, &d))
                } else {
                    None
                });
            }
            grads
        },
    ))
}
