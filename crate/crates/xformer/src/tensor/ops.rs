//! Differentiable numeric kernels: elementwise arithmetic, matrix products,
//! softmax, layer normalization, GELU, and the small broadcast helpers the
//! attention blocks need.

use rayon::prelude::*;

use super::{c64, Node, ParentGrads, Scalar, Tensor};
use crate::error::{Result, XError};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(XError::Dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn grad_if<T: Scalar>(wanted: bool, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    if wanted {
        Some(f())
    } else {
        None
    }
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x + *y).collect()));
    Ok(Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || g.to_vec()),
                grad_if(node.parent_tracks(1), || g.to_vec()),
            ]
        },
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "sub")?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x - *y).collect()));
    Ok(Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || g.to_vec()),
                grad_if(node.parent_tracks(1), || g.iter().map(|v| -*v).collect()),
            ]
        },
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    let out = a.with_data(|ad| b.with_data(|bd| ad.iter().zip(bd).map(|(x, y)| *x * *y).collect()));
    Ok(Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || {
                    node.parent(1)
                        .with_data(|bd| g.iter().zip(bd).map(|(gi, y)| *gi * *y).collect())
                }),
                grad_if(node.parent_tracks(1), || {
                    node.parent(0)
                        .with_data(|ad| g.iter().zip(ad).map(|(gi, x)| *gi * *x).collect())
                }),
            ]
        },
    ))
}

/// Multiply by a compile-time constant scalar (no gradient for the factor).
pub fn scale<T: Scalar>(a: &Tensor<T>, factor: f64) -> Tensor<T> {
    let f = c64::<T>(factor);
    let out = a.with_data(|ad| ad.iter().map(|x| *x * f).collect());
    Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![grad_if(node.parent_tracks(0), || {
                g.iter().map(|v| *v * f).collect()
            })]
        },
    )
}

pub fn abs<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let out = a.with_data(|ad| ad.iter().map(|x| x.abs()).collect());
    Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            // sign subgradient, 0 at ties
            vec![grad_if(node.parent_tracks(0), || {
                node.parent(0).with_data(|ad| {
                    g.iter()
                        .zip(ad)
                        .map(|(gi, x)| {
                            if *x > T::zero() {
                                *gi
                            } else if *x < T::zero() {
                                -*gi
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                })
            })]
        },
    )
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let s = a.with_data(|ad| ad.iter().fold(T::zero(), |acc, v| acc + *v));
    Ok(Tensor::new_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            let gi = g[0];
            vec![grad_if(node.parent_tracks(0), || {
                vec![gi; node.parent(0).numel()]
            })]
        },
    ))
}

pub fn mean_all<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.numel();
    Ok(scale(&sum_all(a)?, 1.0 / n as f64))
}

/// Lower bound clamp; the gradient passes only where the input is above the
/// bound.
pub fn clamp_min<T: Scalar>(a: &Tensor<T>, min: f64) -> Tensor<T> {
    let m = c64::<T>(min);
    let out = a.with_data(|ad| ad.iter().map(|x| x.max(m)).collect());
    Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![grad_if(node.parent_tracks(0), || {
                node.parent(0).with_data(|ad| {
                    g.iter()
                        .zip(ad)
                        .map(|(gi, x)| if *x > m { *gi } else { T::zero() })
                        .collect()
                })
            })]
        },
    )
}

/// GELU with the tanh approximation (consistent forward/backward pair).
pub fn gelu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let out = a.with_data(|ad| ad.iter().map(|x| gelu_val(*x)).collect());
    Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![grad_if(node.parent_tracks(0), || {
                node.parent(0).with_data(|ad| {
                    g.iter()
                        .zip(ad)
                        .map(|(gi, x)| *gi * gelu_deriv(*x))
                        .collect()
                })
            })]
        },
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<T: Scalar>(x: T) -> T {
    let half = c64::<T>(0.5);
    let u = c64::<T>(GELU_C) * (x + c64::<T>(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let half = c64::<T>(0.5);
    let u = c64::<T>(GELU_C) * (x + c64::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c64::<T>(GELU_C) * (T::one() + c64::<T>(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * sech2 * du
}

// Raw (non-graph) matrix kernels shared by forward passes and VJPs. Each
// output row is produced by exactly one task, so the results do not depend
// on rayon scheduling.

pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let aik = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * *bv;
            }
        }
    });
    out
}

/// `a [m,k] x b^T` where `b` is stored `[n,k]`.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o = acc;
        }
    });
    out
}

/// `a^T x b` where `a` is stored `[k,m]`, producing `[m,n]`.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let api = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += api * *bv;
            }
        }
    });
    out
}

/// Matrix product `[M,K] x [K,N] -> [M,N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match a.shape() {
        [m, k] => (*m, *k),
        s => return Err(XError::Dim(format!("matmul lhs must be rank 2, got {s:?}"))),
    };
    let (k2, n) = match b.shape() {
        [k2, n] => (*k2, *n),
        s => return Err(XError::Dim(format!("matmul rhs must be rank 2, got {s:?}"))),
    };
    if k != k2 {
        return Err(XError::Dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.with_data(|ad| b.with_data(|bd| mm_nn(ad, bd, m, k, n)));
    Ok(Tensor::new_op(
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || {
                    node.parent(1).with_data(|bd| mm_nt(g, bd, m, n, k))
                }),
                grad_if(node.parent_tracks(1), || {
                    node.parent(0).with_data(|ad| mm_tn(ad, g, k, m, n))
                }),
            ]
        },
    ))
}

/// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, k) = match a.shape() {
        [ba, m, k] => (*ba, *m, *k),
        s => return Err(XError::Dim(format!("bmm lhs must be rank 3, got {s:?}"))),
    };
    let (bb, k2, n) = match b.shape() {
        [bb, k2, n] => (*bb, *k2, *n),
        s => return Err(XError::Dim(format!("bmm rhs must be rank 3, got {s:?}"))),
    };
    if ba != bb || k != k2 {
        return Err(XError::Dim(format!(
            "bmm shapes incompatible: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut out = vec![T::zero(); ba * m * n];
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
                o.copy_from_slice(&mm_nn(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            });
            out
        })
    });
    Ok(Tensor::new_op(
        vec![ba, m, n],
        out,
        vec![a.clone(), b.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || {
                    node.parent(1).with_data(|bd| {
                        let mut da = vec![T::zero(); ba * m * k];
                        da.par_chunks_mut(m * k).enumerate().for_each(|(i, o)| {
                            o.copy_from_slice(&mm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &bd[i * k * n..(i + 1) * k * n],
                                m,
                                n,
                                k,
                            ));
                        });
                        da
                    })
                }),
                grad_if(node.parent_tracks(1), || {
                    node.parent(0).with_data(|ad| {
                        let mut db = vec![T::zero(); ba * k * n];
                        db.par_chunks_mut(k * n).enumerate().for_each(|(i, o)| {
                            o.copy_from_slice(&mm_tn(
                                &ad[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                k,
                                m,
                                n,
                            ));
                        });
                        db
                    })
                }),
            ]
        },
    ))
}

fn axis_strides(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(XError::Usage(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (_outer, n, inner) = axis_strides(x.shape(), axis)?;
    let out = x.with_data(|xd| {
        let mut out = vec![T::zero(); xd.len()];
        out.par_chunks_mut(n * inner)
            .enumerate()
            .for_each(|(o, chunk)| {
                let base = o * n * inner;
                for i in 0..inner {
                    let mut max = T::neg_infinity();
                    for j in 0..n {
                        max = max.max(xd[base + j * inner + i]);
                    }
                    let mut denom = T::zero();
                    for j in 0..n {
                        let e = (xd[base + j * inner + i] - max).exp();
                        chunk[j * inner + i] = e;
                        denom += e;
                    }
                    for j in 0..n {
                        chunk[j * inner + i] /= denom;
                    }
                }
            });
        out
    });
    Ok(Tensor::new_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![grad_if(node.parent_tracks(0), || {
                node.with_data(|y| {
                    let mut dx = vec![T::zero(); y.len()];
                    dx.par_chunks_mut(n * inner)
                        .enumerate()
                        .for_each(|(o, chunk)| {
                            let base = o * n * inner;
                            for i in 0..inner {
                                let mut dot = T::zero();
                                for j in 0..n {
                                    let idx = base + j * inner + i;
                                    dot += g[idx] * y[idx];
                                }
                                for j in 0..n {
                                    let idx = base + j * inner + i;
                                    chunk[j * inner + i] = y[idx] * (g[idx] - dot);
                                }
                            }
                        });
                    dx
                })
            })]
        },
    ))
}

/// Layer normalization over the last axis at each position, with scale
/// `gamma` and optional shift `beta` (bias-free when `None`).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: Option<&Tensor<T>>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *x.shape().last().ok_or_else(|| {
        XError::Dim("layer_norm requires at least one axis".into())
    })?;
    if gamma.shape() != [c] {
        return Err(XError::Dim(format!(
            "layer_norm gamma shape {:?} does not match channel count {c}",
            gamma.shape()
        )));
    }
    if let Some(b) = beta {
        if b.shape() != [c] {
            return Err(XError::Dim(format!(
                "layer_norm beta shape {:?} does not match channel count {c}",
                b.shape()
            )));
        }
    }
    let epsv = c64::<T>(eps);
    let compute = |xd: &[T], gd: &[T], bd: Option<&Vec<T>>| {
        let mut out = vec![T::zero(); xd.len()];
        out.par_chunks_mut(c).enumerate().for_each(|(row, chunk)| {
            let xrow = &xd[row * c..(row + 1) * c];
            let inv_n = c64::<T>(1.0 / c as f64);
            let mut mean = T::zero();
            for v in xrow {
                mean += *v;
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for v in xrow {
                let d = *v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let s = (var + epsv).sqrt().recip();
            for j in 0..c {
                let xhat = (xrow[j] - mean) * s;
                chunk[j] = gd[j] * xhat
                    + match bd {
                        Some(b) => b[j],
                        None => T::zero(),
                    };
            }
        });
        out
    };
    let out = x.with_data(|xd| {
        gamma.with_data(|gd| match beta {
            Some(b) => b.with_data(|bd| compute(xd, gd, Some(&bd.to_vec()))),
            None => compute(xd, gd, None),
        })
    });
    let mut parents = vec![x.clone(), gamma.clone()];
    let has_beta = beta.is_some();
    if let Some(b) = beta {
        parents.push(b.clone());
    }
    Ok(Tensor::new_op(
        x.shape().to_vec(),
        out,
        parents,
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            let rows = node.numel() / c;
            let (dx, dgamma, dbeta) = node.parent(0).with_data(|xd| {
                node.parent(1).with_data(|gd| {
                    let mut dx = vec![T::zero(); xd.len()];
                    let inv_n = c64::<T>(1.0 / c as f64);
                    dx.par_chunks_mut(c).enumerate().for_each(|(row, chunk)| {
                        let xrow = &xd[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let mut mean = T::zero();
                        for v in xrow {
                            mean += *v;
                        }
                        mean = mean * inv_n;
                        let mut var = T::zero();
                        for v in xrow {
                            let d = *v - mean;
                            var += d * d;
                        }
                        var = var * inv_n;
                        let s = (var + epsv).sqrt().recip();
                        // dxhat = g * gamma; dx = s*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * s;
                            let dxh = grow[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xhat;
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * s;
                            let dxh = grow[j] * gd[j];
                            chunk[j] = s * (dxh - m1 - xhat * m2);
                        }
                    });
                    // Parameter gradients: sequential over rows, deterministic.
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for row in 0..rows {
                        let xrow = &xd[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let mut mean = T::zero();
                        for v in xrow {
                            mean += *v;
                        }
                        mean = mean * inv_n;
                        let mut var = T::zero();
                        for v in xrow {
                            let d = *v - mean;
                            var += d * d;
                        }
                        var = var * inv_n;
                        let s = (var + epsv).sqrt().recip();
                        for j in 0..c {
                            let xhat = (xrow[j] - mean) * s;
                            dgamma[j] += grow[j] * xhat;
                            dbeta[j] += grow[j];
                        }
                    }
                    (dx, dgamma, dbeta)
                })
            });
            let mut grads = vec![
                grad_if(node.parent_tracks(0), || dx),
                grad_if(node.parent_tracks(1), || dgamma),
            ];
            if has_beta {
                grads.push(grad_if(node.parent_tracks(2), || dbeta));
            }
            grads
        },
    ))
}

/// L2-normalizes each row along the last axis: `y = x / sqrt(sum x^2 + eps)`.
pub fn l2_normalize_last<T: Scalar>(x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| XError::Dim("l2_normalize requires at least one axis".into()))?;
    let epsv = c64::<T>(eps);
    let out = x.with_data(|xd| {
        let mut out = vec![T::zero(); xd.len()];
        out.par_chunks_mut(n).enumerate().for_each(|(row, chunk)| {
            let xrow = &xd[row * n..(row + 1) * n];
            let mut ss = T::zero();
            for v in xrow {
                ss += *v * *v;
            }
            let inv = (ss + epsv).sqrt().recip();
            for j in 0..n {
                chunk[j] = xrow[j] * inv;
            }
        });
        out
    });
    Ok(Tensor::new_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![grad_if(node.parent_tracks(0), || {
                node.parent(0).with_data(|xd| {
                    node.with_data(|y| {
                        let mut dx = vec![T::zero(); xd.len()];
                        dx.par_chunks_mut(n).enumerate().for_each(|(row, chunk)| {
                            let xrow = &xd[row * n..(row + 1) * n];
                            let yrow = &y[row * n..(row + 1) * n];
                            let grow = &g[row * n..(row + 1) * n];
                            let mut ss = T::zero();
                            for v in xrow {
                                ss += *v * *v;
                            }
                            let inv = (ss + epsv).sqrt().recip();
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += grow[j] * yrow[j];
                            }
                            for j in 0..n {
                                chunk[j] = (grow[j] - yrow[j] * dot) * inv;
                            }
                        });
                        dx
                    })
                })
            })]
        },
    ))
}

/// Divides group `i` of `x` (viewed as `[groups, block]`) by `s[i]`.
/// The divisor is a learnable tensor of shape `[groups]`.
pub fn div_per_group<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let groups = match s.shape() {
        [g] => *g,
        sh => {
            return Err(XError::Dim(format!(
                "div_per_group divisor must be rank 1, got {sh:?}"
            )))
        }
    };
    if x.shape().is_empty() || x.shape()[0] != groups {
        return Err(XError::Dim(format!(
            "div_per_group: leading extent of {:?} must equal group count {groups}",
            x.shape()
        )));
    }
    let block = x.numel() / groups;
    let out = x.with_data(|xd| {
        s.with_data(|sd| {
            let mut out = vec![T::zero(); xd.len()];
            for gi in 0..groups {
                let inv = sd[gi].recip();
                for j in 0..block {
                    out[gi * block + j] = xd[gi * block + j] * inv;
                }
            }
            out
        })
    });
    Ok(Tensor::new_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), s.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            let ds_dx = node.parent(1).with_data(|sd| {
                let dx = grad_if(node.parent_tracks(0), || {
                    let mut dx = vec![T::zero(); g.len()];
                    for gi in 0..groups {
                        let inv = sd[gi].recip();
                        for j in 0..block {
                            dx[gi * block + j] = g[gi * block + j] * inv;
                        }
                    }
                    dx
                });
                let ds = grad_if(node.parent_tracks(1), || {
                    // d/ds (x/s) = -x/s^2 = -y/s
                    node.with_data(|y| {
                        let mut ds = vec![T::zero(); groups];
                        for gi in 0..groups {
                            let inv = sd[gi].recip();
                            let mut acc = T::zero();
                            for j in 0..block {
                                acc += g[gi * block + j] * y[gi * block + j];
                            }
                            ds[gi] = -acc * inv;
                        }
                        ds
                    })
                });
                (ds, dx)
            });
            vec![ds_dx.1, ds_dx.0]
        },
    ))
}

/// Broadcast add: `a` viewed as `[outer, repeat, block]` plus `b` viewed as
/// `[outer, block]`, repeated along the middle axis.
pub fn add_broadcast_blocks<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    outer: usize,
    repeat: usize,
    block: usize,
) -> Result<Tensor<T>> {
    if a.numel() != outer * repeat * block || b.numel() != outer * block {
        return Err(XError::Dim(format!(
            "add_broadcast_blocks: {:?} + {:?} incompatible with ({outer},{repeat},{block})",
            a.shape(),
            b.shape()
        )));
    }
    let out = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut out = vec![T::zero(); ad.len()];
            out.par_chunks_mut(block).enumerate().for_each(|(i, chunk)| {
                let o = i / repeat;
                let abase = i * block;
                let bbase = o * block;
                for j in 0..block {
                    chunk[j] = ad[abase + j] + bd[bbase + j];
                }
            });
            out
        })
    });
    Ok(Tensor::new_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || g.to_vec()),
                grad_if(node.parent_tracks(1), || {
                    let mut db = vec![T::zero(); outer * block];
                    for o in 0..outer {
                        for r in 0..repeat {
                            let base = (o * repeat + r) * block;
                            for j in 0..block {
                                db[o * block + j] += g[base + j];
                            }
                        }
                    }
                    db
                }),
            ]
        },
    ))
}

/// Concatenates two tensors along the last axis.
pub fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != b.shape().len()
        || a.shape()[..a.shape().len() - 1] != b.shape()[..b.shape().len() - 1]
    {
        return Err(XError::Dim(format!(
            "concat_last: shapes {:?} and {:?} differ off the last axis",
            a.shape(),
            b.shape()
        )));
    }
    let ca = *a.shape().last().unwrap();
    let cb = *b.shape().last().unwrap();
    let rows = a.numel() / ca;
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let out = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut out = vec![T::zero(); rows * (ca + cb)];
            for r in 0..rows {
                out[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(&ad[r * ca..(r + 1) * ca]);
                out[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                    .copy_from_slice(&bd[r * cb..(r + 1) * cb]);
            }
            out
        })
    });
    Ok(Tensor::new_op(
        shape,
        out,
        vec![a.clone(), b.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            vec![
                grad_if(node.parent_tracks(0), || {
                    let mut da = vec![T::zero(); rows * ca];
                    for r in 0..rows {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    da
                }),
                grad_if(node.parent_tracks(1), || {
                    let mut db = vec![T::zero(); rows * cb];
                    for r in 0..rows {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    db
                }),
            ]
        },
    ))
}

/// Broadcast add of a `[C]` bias over the last axis of `x`.
pub fn add_bias_last<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| XError::Dim("add_bias_last requires at least one axis".into()))?;
    if bias.shape() != [c] {
        return Err(XError::Dim(format!(
            "bias shape {:?} does not match last extent {c}",
            bias.shape()
        )));
    }
    add_broadcast_blocks(x, bias, 1, x.numel() / c, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::numeric_gradient;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-8 + 1e-6 * a.abs().max(b.abs())
    }

    #[test]
    fn softmax_uniform_row() {
        let x = Tensor::from_vec(&[5], vec![2.0f64; 5]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::from_vec(&[2], vec![0.0f64, (2.0f64).ln()]).unwrap();
        let y = softmax(&x, 0).unwrap().data();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_stability() {
        let vals = vec![1e4f64, -1e4, 3.0, 0.5];
        let x = Tensor::from_vec(&[4], vals.clone()).unwrap();
        let shifted =
            Tensor::from_vec(&[4], vals.iter().map(|v| v + 123.456).collect()).unwrap();
        let a = softmax(&x, 0).unwrap().data();
        let b = softmax(&shifted, 0).unwrap().data();
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let x = Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = softmax(&x, 1).unwrap().data();
        // Rows along axis 1 must sum to 1 for each (outer, inner) pair.
        for o in 0..2 {
            for i in 0..2 {
                let s = y[o * 4 + i] + y[o * 4 + 2 + i];
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::from_vec(&[2, 3], vec![5.0f64; 6]).unwrap();
        let gamma = Tensor::from_vec(&[3], vec![1.0f64; 3]).unwrap();
        let beta = Tensor::from_vec(&[3], vec![0.0f64; 3]).unwrap();
        let y = layer_norm(&x, &gamma, Some(&beta), 1e-6).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 3.0]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0f64; 2]).unwrap();
        let y = layer_norm(&x, &gamma, None, 1e-12).unwrap().data();
        assert!((y[0] + 1.0).abs() < 1e-5);
        assert!((y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_gamma_zero_beta_five() {
        let x = Tensor::from_vec(&[2, 2], vec![0.3f64, -2.0, 9.0, 4.5]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![0.0f64; 2]).unwrap();
        let beta = Tensor::from_vec(&[2], vec![5.0f64; 2]).unwrap();
        let y = layer_norm(&x, &gamma, Some(&beta), 1e-6).unwrap();
        for v in y.data() {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn layer_norm_rejects_bad_gamma() {
        let x = Tensor::from_vec(&[2, 3], vec![0.0f64; 6]).unwrap();
        let gamma = Tensor::from_vec(&[2], vec![1.0f64; 2]).unwrap();
        assert!(matches!(
            layer_norm(&x, &gamma, None, 1e-6),
            Err(XError::Dim(_))
        ));
    }

    #[test]
    fn matmul_matches_hand_example() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![5.0f64, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap().data();
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gradcheck_core_ops() {
        // Composite touching mul, matmul, softmax, layer_norm, gelu, abs.
        let w = Tensor::param(&[3, 3], vec![0.3f64, -0.1, 0.5, 0.2, 0.7, -0.4, 0.1, 0.1, 0.9])
            .unwrap();
        let gamma = Tensor::param(&[3], vec![1.1f64, 0.9, 1.0]).unwrap();
        let beta = Tensor::param(&[3], vec![0.1f64, -0.2, 0.0]).unwrap();
        let x0 = vec![0.5f64, -1.2, 0.3, 2.0, 0.1, -0.7];

        let coef =
            Tensor::from_vec(&[2, 3], vec![0.9f64, -1.4, 0.2, 1.7, -0.3, 0.8]).unwrap();
        let f = |x: &Tensor<f64>| {
            let h = matmul(x, &w)?;
            let h = layer_norm(&h, &gamma, Some(&beta), 1e-6)?;
            let h = gelu(&h);
            let h = softmax(&h, 1)?;
            mean_all(&abs(&mul(&h, &coef)?))
        };

        let x = Tensor::param(&[2, 3], x0.clone()).unwrap();
        let loss = f(&x).unwrap();
        loss.backward().unwrap();
        let got = x.grad().unwrap();
        let want = numeric_gradient(f, &Tensor::from_vec(&[2, 3], x0).unwrap(), 1e-5)
            .unwrap()
            .data();
        for (a, b) in got.iter().zip(&want) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
    }

    #[test]
    fn gradcheck_l2_normalize_and_div_per_group() {
        let x0 = vec![0.4f64, -0.8, 1.5, 0.3, 0.9, -0.2];
        let tau = Tensor::param(&[2], vec![0.7f64, 1.3]).unwrap();
        let coef =
            Tensor::from_vec(&[2, 3], vec![1.1f64, -0.4, 0.6, -1.2, 0.5, 0.9]).unwrap();
        let f = |x: &Tensor<f64>| {
            let n = l2_normalize_last(x, 1e-12)?;
            let d = div_per_group(&n, &tau)?;
            sum_all(&mul(&d, &coef)?)
        };
        let x = Tensor::param(&[2, 3], x0.clone()).unwrap();
        let loss = f(&x).unwrap();
        loss.backward().unwrap();
        let got = x.grad().unwrap();
        let want = numeric_gradient(f, &Tensor::from_vec(&[2, 3], x0.clone()).unwrap(), 1e-6)
            .unwrap()
            .data();
        for (a, b) in got.iter().zip(&want) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
        // temperature gradient via its own numeric probe
        let tg = tau.grad().unwrap();
        let xfix = Tensor::from_vec(&[2, 3], x0).unwrap();
        let tnum = numeric_gradient(
            |t: &Tensor<f64>| {
                let n = l2_normalize_last(&xfix, 1e-12)?;
                let d = div_per_group(&n, t)?;
                sum_all(&mul(&d, &coef)?)
            },
            &Tensor::from_vec(&[2], vec![0.7f64, 1.3]).unwrap(),
            1e-6,
        )
        .unwrap()
        .data();
        for (a, b) in tg.iter().zip(&tnum) {
            assert!(close(*a, *b), "{a} vs {b}");
        }
    }

    #[test]
    fn concat_and_broadcast_roundtrip_grads() {
        let a = Tensor::param(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[2, 1], vec![10.0f64, 20.0]).unwrap();
        let c = concat_last(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), vec![1.0, 2.0, 10.0, 3.0, 4.0, 20.0]);
        let loss = sum_all(&mul(&c, &c).unwrap()).unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(b.grad().unwrap(), vec![20.0, 40.0]);
    }

    #[test]
    fn add_broadcast_blocks_tiles_and_reduces() {
        let a = Tensor::param(&[2, 2, 2], vec![0.0f64; 8]).unwrap();
        let b = Tensor::param(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = add_broadcast_blocks(&a, &b, 2, 2, 2).unwrap();
        assert_eq!(y.data(), vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let loss = sum_all(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0, 2.0]);
    }
}
