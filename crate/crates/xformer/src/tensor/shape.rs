//! Shape rearrangements built on one gather primitive: every output element
//! copies one input element (or zero-fills), so the reverse pass is a
//! scatter-add. Covers reshape, permute, cyclic shifts, reflect padding,
//! cropping, channel splits, and pixel shuffle/unshuffle.

use std::sync::Arc;

use super::{Node, ParentGrads, Scalar, Tensor};
use crate::error::{Result, XError};

/// Marker for output elements with no source (zero fill).
pub(crate) const NO_SOURCE: usize = usize::MAX;

/// Gather op: `out[i] = x[map[i]]` (`NO_SOURCE` entries become zero).
pub(crate) fn reindex<T: Scalar>(
    x: &Tensor<T>,
    shape: Vec<usize>,
    map: Arc<Vec<usize>>,
) -> Tensor<T> {
    debug_assert_eq!(shape.iter().product::<usize>(), map.len());
    let out = x.with_data(|xd| {
        map.iter()
            .map(|&src| if src == NO_SOURCE { T::zero() } else { xd[src] })
            .collect()
    });
    let bmap = Arc::clone(&map);
    Tensor::new_op(
        shape,
        out,
        vec![x.clone()],
        move |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            if !node.parent_tracks(0) {
                return vec![None];
            }
            let mut dx = vec![T::zero(); node.parent(0).numel()];
            for (i, &src) in bmap.iter().enumerate() {
                if src != NO_SOURCE {
                    dx[src] += g[i];
                }
            }
            vec![Some(dx)]
        },
    )
}

/// Same data, new shape (element count must match).
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(XError::Dim(format!(
            "reshape: {:?} to {:?} changes element count",
            x.shape(),
            shape
        )));
    }
    let out = x.data();
    Ok(Tensor::new_op(
        shape.to_vec(),
        out,
        vec![x.clone()],
        |node: &Node<T>, g: &[T]| -> ParentGrads<T> {
            if node.parent_tracks(0) {
                vec![Some(g.to_vec())]
            } else {
                vec![None]
            }
        },
    ))
}

fn dims3<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(XError::Dim(format!("{what} expects [H, W, C], got {s:?}"))),
    }
}

/// Axis permutation.
pub fn permute<T: Scalar>(x: &Tensor<T>, order: &[usize]) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let mut seen = vec![false; rank];
    if order.len() != rank || order.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(XError::Usage(format!(
            "permute order {order:?} is not a permutation of rank {rank}"
        )));
    }
    let in_shape = x.shape().to_vec();
    let out_shape: Vec<usize> = order.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * in_shape[a + 1];
    }
    let numel = x.numel();
    let mut map = vec![0usize; numel];
    let mut idx = vec![0usize; rank];
    for slot in map.iter_mut() {
        let mut src = 0;
        for (a, &o) in order.iter().enumerate() {
            src += idx[a] * in_strides[o];
        }
        *slot = src;
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(reindex(x, out_shape, Arc::new(map)))
}

/// Cyclic 2-D shift of a `[H, W, C]` tensor; positive offsets move content
/// down/right. Exact inverse of the shift by the negated offsets.
pub fn roll2d<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "roll2d")?;
    let mut map = vec![0usize; h * w * c];
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for xx in 0..w {
            let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
            let dst = (y * w + xx) * c;
            let src = (sy * w + sx) * c;
            for ch in 0..c {
                map[dst + ch] = src + ch;
            }
        }
    }
    Ok(reindex(x, vec![h, w, c], Arc::new(map)))
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Reflect padding (edge not repeated) on both spatial axes.
pub fn reflect_pad2d<T: Scalar>(
    x: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "reflect_pad2d")?;
    let nh = h + top + bottom;
    let nw = w + left + right;
    let mut map = vec![0usize; nh * nw * c];
    for y in 0..nh {
        let sy = reflect_index(y as isize - top as isize, h);
        for xx in 0..nw {
            let sx = reflect_index(xx as isize - left as isize, w);
            let dst = (y * nw + xx) * c;
            let src = (sy * w + sx) * c;
            for ch in 0..c {
                map[dst + ch] = src + ch;
            }
        }
    }
    Ok(reindex(x, vec![nh, nw, c], Arc::new(map)))
}

/// Spatial crop of a `[H, W, C]` tensor.
pub fn crop2d<T: Scalar>(
    x: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "crop2d")?;
    if top + height > h || left + width > w {
        return Err(XError::Dim(format!(
            "crop2d: region {top}+{height} x {left}+{width} exceeds {:?}",
            x.shape()
        )));
    }
    let mut map = vec![0usize; height * width * c];
    for y in 0..height {
        for xx in 0..width {
            let dst = (y * width + xx) * c;
            let src = ((y + top) * w + (xx + left)) * c;
            for ch in 0..c {
                map[dst + ch] = src + ch;
            }
        }
    }
    Ok(reindex(x, vec![height, width, c], Arc::new(map)))
}

/// Takes channels `[offset, offset+len)` of a `[H, W, C]` tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, offset: usize, len: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "slice_channels")?;
    if offset + len > c {
        return Err(XError::Dim(format!(
            "slice_channels: [{offset}, {}) exceeds {c} channels",
            offset + len
        )));
    }
    let mut map = vec![0usize; h * w * len];
    for pos in 0..h * w {
        for ch in 0..len {
            map[pos * len + ch] = pos * c + offset + ch;
        }
    }
    Ok(reindex(x, vec![h, w, len], Arc::new(map)))
}

/// Space-to-depth: `[H, W, C] -> [H/r, W/r, C r^2]`. The output channel
/// ordering is (sub-row, sub-col, source-channel) with the source channel
/// fastest; this ordering is normative for checkpoint compatibility.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(XError::Dim(format!(
            "pixel_unshuffle: extents {:?} not divisible by factor {r}",
            x.shape()
        )));
    }
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut map = vec![0usize; h * w * c];
    for y in 0..oh {
        for xx in 0..ow {
            for dr in 0..r {
                for dc in 0..r {
                    for ch in 0..c {
                        let dst = (y * ow + xx) * oc + (dr * r + dc) * c + ch;
                        let src = ((y * r + dr) * w + (xx * r + dc)) * c + ch;
                        map[dst] = src;
                    }
                }
            }
        }
    }
    Ok(reindex(x, vec![oh, ow, oc], Arc::new(map)))
}

/// Depth-to-space inverse of [`pixel_unshuffle`]:
/// `[H, W, C r^2] -> [H r, W r, C]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x, "pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(XError::Dim(format!(
            "pixel_shuffle: channels {c} not divisible by {r}^2"
        )));
    }
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut map = vec![0usize; oh * ow * oc];
    for y in 0..oh {
        let (sy, dr) = (y / r, y % r);
        for xx in 0..ow {
            let (sx, dc) = (xx / r, xx % r);
            for ch in 0..oc {
                let dst = (y * ow + xx) * oc + ch;
                let src = (sy * w + sx) * c + (dr * r + dc) * oc + ch;
                map[dst] = src;
            }
        }
    }
    Ok(reindex(x, vec![oh, ow, oc], Arc::new(map)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;
    use proptest::prelude::*;

    #[test]
    fn pixel_unshuffle_ordering_is_normative() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_unshuffle_shape_arithmetic() {
        let x = Tensor::zeros(&[16, 16, 48]).unwrap();
        let y = pixel_unshuffle::<f32>(&x, 2).unwrap();
        assert_eq!(y.shape(), &[8, 8, 192]);
    }

    #[test]
    fn pixel_unshuffle_rejects_odd_extent() {
        let x = Tensor::zeros(&[3, 4, 1]).unwrap();
        assert!(matches!(
            pixel_unshuffle::<f32>(&x, 2),
            Err(XError::Dim(_))
        ));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge_repeat() {
        // Row [a, b, c] padded by 2 on the left -> [c, b, a, b, c].
        let x = Tensor::from_vec(&[1, 3, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let y = reflect_pad2d(&x, 0, 0, 2, 0).unwrap();
        assert_eq!(y.data(), vec![3.0, 2.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn reflect_pad_folds_beyond_input_size() {
        let x = Tensor::from_vec(&[1, 2, 1], vec![1.0f64, 2.0]).unwrap();
        let y = reflect_pad2d(&x, 0, 0, 0, 5).unwrap();
        assert_eq!(y.data(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn roll_roundtrip_is_exact() {
        let x = Tensor::from_vec(&[3, 4, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let y = roll2d(&roll2d(&x, -1, -2).unwrap(), 1, 2).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn reindex_grad_scatter_adds_on_duplicates() {
        // Reflect pad duplicates interior pixels, so their gradient doubles.
        let x = Tensor::param(&[1, 3, 1], vec![1.0f64, 2.0, 3.0]).unwrap();
        let y = reflect_pad2d(&x, 0, 0, 1, 1).unwrap();
        let loss = ops::sum_all(&y).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 3.0, 1.0]);
    }

    proptest! {
        #[test]
        fn shuffle_unshuffle_inverse(
            hb in 1usize..4, wb in 1usize..4, c in 1usize..4, r in 2usize..5, seed in 0u64..1000
        ) {
            use rand::{Rng, SeedableRng};
            let (h, w) = (hb * r, wb * r);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[h, w, c], data.clone()).unwrap();
            let back = pixel_shuffle(&pixel_unshuffle(&x, r).unwrap(), r).unwrap();
            prop_assert_eq!(back.data(), data);
        }

        #[test]
        fn permute_roundtrip(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[2, 3, 4], data.clone()).unwrap();
            let y = permute(&permute(&x, &[2, 0, 1]).unwrap(), &[1, 2, 0]).unwrap();
            prop_assert_eq!(y.data(), data);
        }
    }
}
