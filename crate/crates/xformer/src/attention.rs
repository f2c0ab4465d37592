//! The two self-attention mechanisms: window-based spatial attention with a
//! relative position bias and optional shifted windows, and channel-wise
//! cross-covariance attention with a learnable per-head temperature.

use std::sync::Arc;

use crate::error::{Result, XError};
use crate::tensor::conv::ConvKernel;
use crate::tensor::shape::{reindex, reshape, roll2d};
use crate::tensor::{ops, Scalar, Tensor};

/// Parameters of window-based multi-head self-attention.
///
/// `wq/wk/wv/wo` are `[C, C]` linear maps; `rpe_table` is `[(2G-1)^2, heads]`.
pub struct WindowAttentionParams<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub rpe_table: Tensor<T>,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
}

impl<T: Scalar> WindowAttentionParams<T> {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if channels % self.heads != 0 {
            return Err(XError::Config(format!(
                "channels {channels} not divisible by heads {}",
                self.heads
            )));
        }
        let side = 2 * self.window - 1;
        if self.rpe_table.shape() != [side * side, self.heads] {
            return Err(XError::Config(format!(
                "rpe table shape {:?} does not match window {} / heads {}",
                self.rpe_table.shape(),
                self.window,
                self.heads
            )));
        }
        Ok(())
    }
}

/// Parameters of channel-wise (cross-covariance) attention. Queries, keys and
/// values come from a 1x1 pointwise conv followed by a 3x3 depthwise conv.
pub struct ChannelAttentionParams<T: Scalar> {
    pub q_point: ConvKernel<T>,
    pub q_depth: ConvKernel<T>,
    pub k_point: ConvKernel<T>,
    pub k_depth: ConvKernel<T>,
    pub v_point: ConvKernel<T>,
    pub v_depth: ConvKernel<T>,
    /// One learnable temperature per head, kept strictly positive.
    pub temperature: Tensor<T>,
    pub out_proj: ConvKernel<T>,
    pub heads: usize,
}

fn dims3<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(XError::Dim(format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Splits `[H, W, C]` into non-overlapping `G x G` windows:
/// `[nWin, G^2, C]` with windows and tokens in row-major order.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x)?;
    if g == 0 || h % g != 0 || w % g != 0 {
        return Err(XError::Dim(format!(
            "window_partition: extents {:?} not divisible by window {g}",
            x.shape()
        )));
    }
    let (wy, wx) = (h / g, w / g);
    let n_win = wy * wx;
    let mut map = vec![0usize; h * w * c];
    for win in 0..n_win {
        let (wr, wc) = (win / wx, win % wx);
        for t in 0..g * g {
            let (tr, tc) = (t / g, t % g);
            let src = ((wr * g + tr) * w + (wc * g + tc)) * c;
            let dst = (win * g * g + t) * c;
            for ch in 0..c {
                map[dst + ch] = src + ch;
            }
        }
    }
    Ok(reindex(x, vec![n_win, g * g, c], Arc::new(map)))
}

/// Inverse of [`window_partition`] for the given original extents.
pub fn window_merge<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n_win, g2, c) = match x.shape() {
        [n, g2, c] => (*n, *g2, *c),
        s => return Err(XError::Dim(format!("window_merge expects [nWin, G^2, C], got {s:?}"))),
    };
    let g = (g2 as f64).sqrt() as usize;
    if g * g != g2 || h % g != 0 || w % g != 0 || n_win != (h / g) * (w / g) {
        return Err(XError::Dim(format!(
            "window_merge: {:?} does not tile {h}x{w}",
            x.shape()
        )));
    }
    let wx = w / g;
    let mut map = vec![0usize; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let win = (y / g) * wx + xx / g;
            let t = (y % g) * g + xx % g;
            let src = (win * g2 + t) * c;
            let dst = (y * w + xx) * c;
            for ch in 0..c {
                map[dst + ch] = src + ch;
            }
        }
    }
    Ok(reindex(x, vec![h, w, c], Arc::new(map)))
}

/// Expands the learned table into the additive bias `[heads, G^2, G^2]`:
/// entry `(h, i, j)` reads the table row for the displacement `pos(i)-pos(j)`.
pub fn relative_position_bias<T: Scalar>(table: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    let side = 2 * g - 1;
    let (rows, heads) = match table.shape() {
        [r, h] => (*r, *h),
        s => {
            return Err(XError::Config(format!(
                "rpe table must be [(2G-1)^2, heads], got {s:?}"
            )))
        }
    };
    if rows != side * side {
        return Err(XError::Config(format!(
            "rpe table has {rows} rows, window {g} needs {}",
            side * side
        )));
    }
    let g2 = g * g;
    let mut map = vec![0usize; heads * g2 * g2];
    for h in 0..heads {
        for i in 0..g2 {
            for j in 0..g2 {
                let dr = (i / g) as isize - (j / g) as isize;
                let dc = (i % g) as isize - (j % g) as isize;
                let idx = (dr + g as isize - 1) as usize * side + (dc + g as isize - 1) as usize;
                map[(h * g2 + i) * g2 + j] = idx * heads + h;
            }
        }
    }
    Ok(reindex(table, vec![heads, g2, g2], Arc::new(map)))
}

/// Gather map from a `[HW, C]` projection into `[heads * nWin, G^2, d]`
/// (head index outermost).
fn win_head_map(h: usize, w: usize, c: usize, g: usize, heads: usize) -> (Vec<usize>, usize) {
    let d = c / heads;
    let wx = w / g;
    let n_win = (h / g) * wx;
    let mut map = vec![0usize; h * w * c];
    for head in 0..heads {
        for win in 0..n_win {
            let (wr, wc) = (win / wx, win % wx);
            for t in 0..g * g {
                let (tr, tc) = (t / g, t % g);
                let pix = (wr * g + tr) * w + (wc * g + tc);
                let dst = ((head * n_win + win) * g * g + t) * d;
                for j in 0..d {
                    map[dst + j] = pix * c + head * d + j;
                }
            }
        }
    }
    (map, n_win)
}

/// Inverse gather: `[heads * nWin, G^2, d] -> [H, W, C]`.
fn merge_head_map(h: usize, w: usize, c: usize, g: usize, heads: usize) -> Vec<usize> {
    let d = c / heads;
    let wx = w / g;
    let n_win = (h / g) * wx;
    let mut map = vec![0usize; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let win = (y / g) * wx + xx / g;
            let t = (y % g) * g + xx % g;
            let pix = y * w + xx;
            for ch in 0..c {
                let (head, j) = (ch / d, ch % d);
                map[pix * c + ch] = ((head * n_win + win) * g * g + t) * d + j;
            }
        }
    }
    map
}

/// Additive attention mask for shifted windows: token pairs whose positions
/// wrapped across different image regions get negative infinity. Flat layout
/// `[nWin * G^2 * G^2]`, constant (no gradient).
fn shift_mask<T: Scalar>(h: usize, w: usize, g: usize, s: usize) -> Tensor<T> {
    let region = |pos: usize, n: usize| -> usize {
        if pos < n - g {
            0
        } else if pos < n - s {
            1
        } else {
            2
        }
    };
    let mut labels = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = region(y, h) * 3 + region(x, w);
        }
    }
    let wx = w / g;
    let n_win = (h / g) * wx;
    let g2 = g * g;
    let mut mask = vec![T::zero(); n_win * g2 * g2];
    for win in 0..n_win {
        let (wr, wc) = (win / wx, win % wx);
        let win_label = |t: usize| labels[(wr * g + t / g) * w + (wc * g + t % g)];
        for i in 0..g2 {
            let li = win_label(i);
            for j in 0..g2 {
                if li != win_label(j) {
                    mask[(win * g2 + i) * g2 + j] = T::neg_infinity();
                }
            }
        }
    }
    Tensor::from_vec(&[n_win * g2 * g2], mask).expect("mask construction")
}

/// Window-based multi-head self-attention over `[H, W, C]` (extents must be
/// window multiples; block wrappers pad beforehand). Per window and head:
/// `softmax(Q K^T / sqrt(d) + B) V` with `d = C/heads`, then the heads are
/// concatenated and projected. The shifted variant cyclically shifts by
/// `G/2`, masks cross-boundary pairs, and shifts back.
pub fn w_msa<T: Scalar>(x: &Tensor<T>, p: &WindowAttentionParams<T>) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x)?;
    p.validate(c)?;
    let g = p.window;
    if h % g != 0 || w % g != 0 {
        return Err(XError::Dim(format!(
            "w_msa: extents {:?} not divisible by window {g}",
            x.shape()
        )));
    }
    // A single window has nothing to shift across.
    let shift = if p.shifted && (h > g || w > g) { g / 2 } else { 0 };
    let shifted = if shift > 0 {
        roll2d(x, -(shift as isize), -(shift as isize))?
    } else {
        x.clone()
    };

    let d = c / p.heads;
    let g2 = g * g;
    let flat = reshape(&shifted, &[h * w, c])?;
    let (map, n_win) = win_head_map(h, w, c, g, p.heads);
    let map = Arc::new(map);
    let batch = p.heads * n_win;
    let gather = |t: &Tensor<T>| reindex(t, vec![batch, g2, d], Arc::clone(&map));

    let q = gather(&ops::matmul(&flat, &p.wq)?);
    let k = gather(&ops::matmul(&flat, &p.wk)?);
    let v = gather(&ops::matmul(&flat, &p.wv)?);

    let kt = crate::tensor::shape::permute(&k, &[0, 2, 1])?;
    let scores = ops::scale(&ops::bmm(&q, &kt)?, 1.0 / (d as f64).sqrt());
    let bias = relative_position_bias(&p.rpe_table, g)?;
    let scores = ops::add_broadcast_blocks(&scores, &bias, p.heads, n_win, g2 * g2)?;
    let scores = if shift > 0 {
        let mask = shift_mask::<T>(h, w, g, shift);
        ops::add_broadcast_blocks(&scores, &mask, 1, p.heads, n_win * g2 * g2)?
    } else {
        scores
    };
    let attn = ops::softmax(&scores, 2)?;
    let ctx = ops::bmm(&attn, &v)?;

    let merged = reindex(&ctx, vec![h * w, c], Arc::new(merge_head_map(h, w, c, g, p.heads)));
    let out = reshape(&ops::matmul(&merged, &p.wo)?, &[h, w, c])?;
    if shift > 0 {
        roll2d(&out, shift as isize, shift as isize)
    } else {
        Ok(out)
    }
}

/// Q/K/V as reshaped per-head channel descriptors `[heads, d, N]` with
/// `N = H*W`, rows L2-normalized for Q and K.
fn channel_tokens<T: Scalar>(
    x: &Tensor<T>,
    point: &ConvKernel<T>,
    depth: &ConvKernel<T>,
    heads: usize,
    normalize: bool,
) -> Result<Tensor<T>> {
    let y = depth.apply(&point.apply(x)?)?;
    let (h, w, c) = dims3(&y)?;
    let d = c / heads;
    let n = h * w;
    // [H, W, C] -> [heads, d, N]
    let mut map = vec![0usize; c * n];
    for head in 0..heads {
        for j in 0..d {
            for pix in 0..n {
                map[(head * d + j) * n + pix] = pix * c + head * d + j;
            }
        }
    }
    let tok = reindex(&y, vec![heads, d, n], Arc::new(map));
    if normalize {
        ops::l2_normalize_last(&tok, 1e-12)
    } else {
        Ok(tok)
    }
}

fn check_temperature<T: Scalar>(p: &ChannelAttentionParams<T>) -> Result<()> {
    if p.temperature.shape() != [p.heads] {
        return Err(XError::Config(format!(
            "temperature shape {:?} does not match heads {}",
            p.temperature.shape(),
            p.heads
        )));
    }
    if p.temperature.with_data(|t| t.iter().any(|v| *v <= T::zero())) {
        return Err(XError::Numeric(
            "channel attention temperature must be strictly positive".into(),
        ));
    }
    Ok(())
}

/// Transposed attention map `softmax(Q K^T / tau)` of shape `[heads, d, d]`
/// (debug hook; independent of the spatial extents).
pub fn c_msa_attention_map<T: Scalar>(
    x: &Tensor<T>,
    p: &ChannelAttentionParams<T>,
) -> Result<Tensor<T>> {
    check_temperature(p)?;
    let q = channel_tokens(x, &p.q_point, &p.q_depth, p.heads, true)?;
    let k = channel_tokens(x, &p.k_point, &p.k_depth, p.heads, true)?;
    let kt = crate::tensor::shape::permute(&k, &[0, 2, 1])?;
    let logits = ops::bmm(&q, &kt)?;
    let tau = ops::clamp_min(&p.temperature, 1e-4);
    let scaled = ops::div_per_group(&logits, &tau)?;
    ops::softmax(&scaled, 2)
}

/// Channel-wise multi-head self-attention: attention between channel
/// descriptors (a `[d, d]` map per head), linear in the pixel count.
pub fn c_msa<T: Scalar>(x: &Tensor<T>, p: &ChannelAttentionParams<T>) -> Result<Tensor<T>> {
    let (h, w, c) = dims3(x)?;
    if c % p.heads != 0 {
        return Err(XError::Config(format!(
            "channels {c} not divisible by heads {}",
            p.heads
        )));
    }
    let attn = c_msa_attention_map(x, p)?;
    let v = channel_tokens(x, &p.v_point, &p.v_depth, p.heads, false)?;
    let ctx = ops::bmm(&attn, &v)?; // [heads, d, N]

    let d = c / p.heads;
    let n = h * w;
    let mut map = vec![0usize; n * c];
    for pix in 0..n {
        for ch in 0..c {
            let (head, j) = (ch / d, ch % d);
            map[pix * c + ch] = (head * d + j) * n + pix;
        }
    }
    let spatial = reindex(&ctx, vec![h, w, c], Arc::new(map));
    p.out_proj.apply(&spatial)
}
