//! 3D shifted-window machinery: partition/reverse, cyclic shifts, the
//! additive attention mask, and windowed multi-head self-attention built on
//! [`crate::diffcore`] graph primitives.
//!
//! Token grids are rank-4 tensors (T', H', W', C). Windows are P tokens deep
//! in time and M x M in space; shifting rolls the grid by half a window so
//! consecutive attention passes connect neighboring windows.

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Additive mask value for forbidden attention pairs. Large enough to zero
/// the softmax weight in f32 without overflowing to -inf on subtraction.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Temporal window size.
    pub p: usize,
    /// Spatial window size (square).
    pub m: usize,
}

impl WindowConfig {
    pub fn new(p: usize, m: usize) -> Result<Self> {
        if p == 0 || m == 0 {
            return Err(Error::Config(format!(
                "window sizes must be positive, got P={} M={}",
                p, m
            )));
        }
        Ok(WindowConfig { p, m })
    }

    /// Tokens per window.
    pub fn window_len(&self) -> usize {
        self.p * self.m * self.m
    }

    /// Half-window shift offsets (t, h, w).
    pub fn shift(&self) -> (usize, usize, usize) {
        (self.p / 2, self.m / 2, self.m / 2)
    }

    fn require_even_for_shift(&self) -> Result<()> {
        if self.p % 2 != 0 || self.m % 2 != 0 {
            return Err(Error::Config(format!(
                "shifted windows need even sizes so the half-window shift is integral, got P={} M={}",
                self.p, self.m
            )));
        }
        Ok(())
    }
}

fn round_up(n: usize, k: usize) -> usize {
    n.div_ceil(k).max(1) * k
}

fn grid_dims<S: Scalar>(grid: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    match grid.dims() {
        [t, h, w, c] => Ok((*t, *h, *w, *c)),
        other => Err(Error::Shape(format!(
            "token grid must be rank 4 (T', H', W', C), got {:?}",
            other
        ))),
    }
}

/// (T', H', W') rounded up to multiples of (P, M, M).
pub fn padded_dims(t: usize, h: usize, w: usize, cfg: WindowConfig) -> (usize, usize, usize) {
    (round_up(t, cfg.p), round_up(h, cfg.m), round_up(w, cfg.m))
}

/// Zero-pad the grid so every axis divides its window size. Returns the
/// padded grid and the original dims for [`crop_grid`].
pub fn pad_to_window<S: Scalar>(
    grid: &Tensor<S>,
    cfg: WindowConfig,
) -> Result<(Tensor<S>, (usize, usize, usize))> {
    let (t, h, w, c) = grid_dims(grid)?;
    let (tp, hp, wp) = padded_dims(t, h, w, cfg);
    if (tp, hp, wp) == (t, h, w) {
        return Ok((grid.clone(), (t, h, w)));
    }
    let mut out = Tensor::zeros(&[tp, hp, wp, c]);
    for it in 0..t {
        for ih in 0..h {
            let src = ((it * h + ih) * w) * c;
            let dst = ((it * hp + ih) * wp) * c;
            out.data_mut()[dst..dst + w * c].copy_from_slice(&grid.data()[src..src + w * c]);
        }
    }
    Ok((out, (t, h, w)))
}

/// Crop a padded grid back to `dims` (inverse of [`pad_to_window`]).
pub fn crop_grid<S: Scalar>(grid: &Tensor<S>, dims: (usize, usize, usize)) -> Result<Tensor<S>> {
    let sliced = grid
        .sliced(0, 0, dims.0)?
        .sliced(1, 0, dims.1)?
        .sliced(2, 0, dims.2)?;
    Ok(sliced)
}

/// Torus-roll the grid: the token at (t, h, w) moves to
/// ((t + dt) mod T', (h + dh) mod H', (w + dw) mod W').
pub fn cyclic_shift<S: Scalar>(grid: &Tensor<S>, offsets: (i64, i64, i64)) -> Result<Tensor<S>> {
    let (t, h, w, c) = grid_dims(grid)?;
    let (dt, dh, dw) = (
        offsets.0.rem_euclid(t as i64) as usize,
        offsets.1.rem_euclid(h as i64) as usize,
        offsets.2.rem_euclid(w as i64) as usize,
    );
    if (dt, dh, dw) == (0, 0, 0) {
        return Ok(grid.clone());
    }
    let mut out = Tensor::zeros(grid.dims());
    for it in 0..t {
        let ot = (it + dt) % t;
        for ih in 0..h {
            let oh = (ih + dh) % h;
            for iw in 0..w {
                let ow = (iw + dw) % w;
                let src = ((it * h + ih) * w + iw) * c;
                let dst = ((ot * h + oh) * w + ow) * c;
                out.data_mut()[dst..dst + c].copy_from_slice(&grid.data()[src..src + c]);
            }
        }
    }
    Ok(out)
}

fn partition_check(t: usize, h: usize, w: usize, cfg: WindowConfig) -> Result<()> {
    if t % cfg.p != 0 || h % cfg.m != 0 || w % cfg.m != 0 {
        return Err(Error::Shape(format!(
            "grid ({}, {}, {}) not divisible by window ({}, {}, {})",
            t, h, w, cfg.p, cfg.m, cfg.m
        )));
    }
    Ok(())
}

/// Split the grid into non-overlapping windows: (N, P*M*M, C) with windows
/// in lexicographic window-coordinate order and tokens t-major within each.
pub fn window_partition<S: Scalar>(grid: &Tensor<S>, cfg: WindowConfig) -> Result<Tensor<S>> {
    let (t, h, w, c) = grid_dims(grid)?;
    partition_check(t, h, w, cfg)?;
    let (p, m) = (cfg.p, cfg.m);
    let staged = grid
        .reshaped(&[t / p, p, h / m, m, w / m, m, c])?
        .permuted(&[0, 2, 4, 1, 3, 5, 6])?;
    staged.reshaped(&[(t / p) * (h / m) * (w / m), p * m * m, c])
}

/// Exact inverse of [`window_partition`] for the given grid dims.
pub fn window_reverse<S: Scalar>(
    windows: &Tensor<S>,
    cfg: WindowConfig,
    dims: (usize, usize, usize, usize),
) -> Result<Tensor<S>> {
    let (t, h, w, c) = dims;
    partition_check(t, h, w, cfg)?;
    let (p, m) = (cfg.p, cfg.m);
    let n = (t / p) * (h / m) * (w / m);
    if windows.dims() != [n, p * m * m, c] {
        return Err(Error::Shape(format!(
            "windows dims {:?} inconsistent with grid ({}, {}, {}, {}) and window ({}, {})",
            windows.dims(),
            t,
            h,
            w,
            c,
            p,
            m
        )));
    }
    let staged = windows
        .reshaped(&[t / p, h / m, w / m, p, m, m, c])?
        .permuted(&[0, 3, 1, 4, 2, 5, 6])?;
    staged.reshaped(&[t, h, w, c])
}

/// Region id for a rolled coordinate: 0 before the last full window, 1 up to
/// the shift boundary, 2 past it. Unshifted axes collapse to a single region.
fn axis_region(r: usize, n: usize, k: usize, s: usize) -> i64 {
    // r < n - k, written without underflow when k == n
    if s == 0 {
        0
    } else if r + k < n {
        0
    } else if r < n - s {
        1
    } else {
        2
    }
}

/// Build the additive attention mask (N, L, L) for a padded grid.
///
/// `orig` are the pre-padding dims: padded tokens get a region of their own
/// so real tokens never attend to them. With shifting, tokens that were not
/// contiguous before the cyclic roll fall into different regions and are
/// likewise separated. Entries are 0 (allowed) or [`MASK_NEG`].
pub fn attention_mask<S: Scalar>(
    orig: (usize, usize, usize),
    padded: (usize, usize, usize),
    cfg: WindowConfig,
    shifted: bool,
) -> Result<Tensor<S>> {
    let (t0, h0, w0) = orig;
    let (t, h, w) = padded;
    partition_check(t, h, w, cfg)?;
    if shifted {
        cfg.require_even_for_shift()?;
    }
    let (st, sh, sw) = if shifted { cfg.shift() } else { (0, 0, 0) };

    // region ids in rolled coordinates; rolled r originated at (r + s) mod n
    let mut ids = vec![0i64; t * h * w];
    for rt in 0..t {
        for rh in 0..h {
            for rw in 0..w {
                let (ot, oh, ow) = ((rt + st) % t, (rh + sh) % h, (rw + sw) % w);
                ids[(rt * h + rh) * w + rw] = if ot >= t0 || oh >= h0 || ow >= w0 {
                    -1
                } else {
                    (axis_region(rt, t, cfg.p, st) * 3 + axis_region(rh, h, cfg.m, sh)) * 3
                        + axis_region(rw, w, cfg.m, sw)
                };
            }
        }
    }

    let (p, m) = (cfg.p, cfg.m);
    let (nt, nh, nw) = (t / p, h / m, w / m);
    let l = cfg.window_len();
    let mut mask = Tensor::zeros(&[nt * nh * nw, l, l]);
    let neg = S::from_f64(MASK_NEG);
    let mut win_ids = vec![0i64; l];
    for wt in 0..nt {
        for wh in 0..nh {
            for ww in 0..nw {
                let widx = (wt * nh + wh) * nw + ww;
                let mut k = 0;
                for it in 0..p {
                    for ih in 0..m {
                        for iw in 0..m {
                            let (rt, rh, rw) = (wt * p + it, wh * m + ih, ww * m + iw);
                            win_ids[k] = ids[(rt * h + rh) * w + rw];
                            k += 1;
                        }
                    }
                }
                let base = widx * l * l;
                for i in 0..l {
                    for j in 0..l {
                        if win_ids[i] != win_ids[j] {
                            mask.data_mut()[base + i * l + j] = neg;
                        }
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Flat relative-position-bias indices for every in-window token pair,
/// length L*L, row-major over (i, j). The bias table has
/// (2P-1)*(2M-1)*(2M-1) rows, one per 3D offset.
pub fn relative_position_index(cfg: WindowConfig) -> Vec<usize> {
    let (p, m) = (cfg.p, cfg.m);
    let l = cfg.window_len();
    let coord = |k: usize| (k / (m * m), (k / m) % m, k % m);
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        let (ti, hi, wi) = coord(i);
        for j in 0..l {
            let (tj, hj, wj) = coord(j);
            let dt = ti + p - 1 - tj;
            let dh = hi + m - 1 - hj;
            let dw = wi + m - 1 - wj;
            idx.push((dt * (2 * m - 1) + dh) * (2 * m - 1) + dw);
        }
    }
    idx
}

/// Number of bias-table rows for a window config.
pub fn bias_table_rows(cfg: WindowConfig) -> usize {
    (2 * cfg.p - 1) * (2 * cfg.m - 1) * (2 * cfg.m - 1)
}

/// Graph node ids of one attention layer's parameters.
#[derive(Clone, Copy)]
pub struct AttnNodes {
    /// (C, 3C) fused query/key/value projection.
    pub qkv_w: NodeId,
    /// (3C,)
    pub qkv_b: NodeId,
    /// (C, C) output projection.
    pub proj_w: NodeId,
    /// (C,)
    pub proj_b: NodeId,
    /// (bias_table_rows, heads)
    pub bias_table: NodeId,
    pub heads: usize,
}

/// Windowed multi-head self-attention over (N, L, C) windows:
/// softmax(Q K^T / sqrt(d) + bias + mask) V per window and head, heads
/// concatenated and output-projected.
pub fn w_msa<S: Scalar>(
    g: &mut Graph<S>,
    windows: NodeId,
    attn: &AttnNodes,
    cfg: WindowConfig,
    mask: Option<&Tensor<S>>,
) -> Result<NodeId> {
    let dims = g.dims(windows).to_vec();
    let [n, l, c] = dims[..] else {
        return Err(Error::Shape(format!(
            "w_msa expects (N, L, C) windows, got {:?}",
            dims
        )));
    };
    if l != cfg.window_len() {
        return Err(Error::Shape(format!(
            "window length {} does not match config P*M*M = {}",
            l,
            cfg.window_len()
        )));
    }
    let nh = attn.heads;
    if nh == 0 || c % nh != 0 {
        return Err(Error::Config(format!(
            "channel count {} not divisible by head count {}",
            c, nh
        )));
    }
    let hd = c / nh;

    let qkv = g.linear(windows, attn.qkv_w, attn.qkv_b)?;
    let split_head = |g: &mut Graph<S>, part: NodeId| -> Result<NodeId> {
        let r = g.reshape(part, &[n, l, nh, hd])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[n * nh, l, hd])
    };
    let q = g.slice(qkv, 2, 0, c)?;
    let k = g.slice(qkv, 2, c, c)?;
    let v = g.slice(qkv, 2, 2 * c, c)?;
    let q = split_head(g, q)?;
    let k = split_head(g, k)?;
    let v = split_head(g, v)?;

    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());

    // relative position bias: one (L, L) map per head, broadcast over windows
    let rel = relative_position_index(cfg);
    let gathered = g.gather_rows(attn.bias_table, &rel)?;
    let bias = g.reshape(gathered, &[l, l, nh])?;
    let bias = g.permute(bias, &[2, 0, 1])?;
    let bias = g.reshape(bias, &[1, nh, l, l])?;
    let scores = g.reshape(scores, &[n, nh, l, l])?;
    let scores = g.add(scores, bias)?;

    let scores = match mask {
        Some(mt) if mt.data().iter().any(|v| v.as_f64() != 0.0) => {
            if mt.dims() != [n, l, l] {
                return Err(Error::Shape(format!(
                    "mask dims {:?} do not match windows ({}, {}, {})",
                    mt.dims(),
                    n,
                    l,
                    l
                )));
            }
            g.masked_add(scores, mt.reshaped(&[n, 1, l, l])?)?
        }
        _ => scores,
    };

    let probs = {
        let flat = g.reshape(scores, &[n * nh, l, l])?;
        g.softmax(flat)?
    };
    let ctx = g.matmul(probs, v)?;
    let merged = {
        let r = g.reshape(ctx, &[n, nh, l, hd])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[n, l, c])?
    };
    g.linear(merged, attn.proj_w, attn.proj_b)
}

/// Graph version of the torus roll (implemented as slice + concat).
pub fn cyclic_shift_node<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    offsets: (i64, i64, i64),
) -> Result<NodeId> {
    let mut cur = x;
    for (axis, off) in [offsets.0, offsets.1, offsets.2].into_iter().enumerate() {
        let n = g.dims(cur)[axis];
        let o = off.rem_euclid(n as i64) as usize;
        if o == 0 {
            continue;
        }
        let head = g.slice(cur, axis, n - o, o)?;
        let tail = g.slice(cur, axis, 0, n - o)?;
        cur = g.concat(&[head, tail], axis)?;
    }
    Ok(cur)
}

fn pad_axis_node<S: Scalar>(g: &mut Graph<S>, x: NodeId, axis: usize, target: usize) -> Result<NodeId> {
    let cur = g.dims(x)[axis];
    if cur == target {
        return Ok(x);
    }
    let mut dims = g.dims(x).to_vec();
    dims[axis] = target - cur;
    let pad = g.constant(Tensor::zeros(&dims));
    g.concat(&[x, pad], axis)
}

/// One full windowed-attention pass over a token grid node (T', H', W', C):
/// pad to window multiples, optionally half-window roll, partition, masked
/// attention, reverse, unroll, crop. Padded and non-contiguous tokens are
/// masked out of attention.
pub fn windowed_attention<S: Scalar>(
    g: &mut Graph<S>,
    grid: NodeId,
    attn: &AttnNodes,
    cfg: WindowConfig,
    shifted: bool,
) -> Result<NodeId> {
    let [t0, h0, w0, c] = g.dims(grid)[..] else {
        return Err(Error::Shape(format!(
            "windowed_attention expects a rank-4 grid, got {:?}",
            g.dims(grid)
        )));
    };
    if shifted {
        cfg.require_even_for_shift()?;
    }
    let (tp, hp, wp) = padded_dims(t0, h0, w0, cfg);
    let mut x = grid;
    x = pad_axis_node(g, x, 0, tp)?;
    x = pad_axis_node(g, x, 1, hp)?;
    x = pad_axis_node(g, x, 2, wp)?;

    let (st, sh, sw) = if shifted { cfg.shift() } else { (0, 0, 0) };
    if shifted {
        x = cyclic_shift_node(g, x, (-(st as i64), -(sh as i64), -(sw as i64)))?;
    }
    let (p, m) = (cfg.p, cfg.m);
    let n = (tp / p) * (hp / m) * (wp / m);
    let l = cfg.window_len();
    let windows = {
        let r = g.reshape(x, &[tp / p, p, hp / m, m, wp / m, m, c])?;
        let perm = g.permute(r, &[0, 2, 4, 1, 3, 5, 6])?;
        g.reshape(perm, &[n, l, c])?
    };
    let mask = attention_mask::<S>((t0, h0, w0), (tp, hp, wp), cfg, shifted)?;
    let out = w_msa(g, windows, attn, cfg, Some(&mask))?;
    let mut back = {
        let r = g.reshape(out, &[tp / p, hp / m, wp / m, p, m, m, c])?;
        let perm = g.permute(r, &[0, 3, 1, 4, 2, 5, 6])?;
        g.reshape(perm, &[tp, hp, wp, c])?
    };
    if shifted {
        back = cyclic_shift_node(g, back, (st as i64, sh as i64, sw as i64))?;
    }
    let cropped = {
        let a = g.slice(back, 0, 0, t0)?;
        let b = g.slice(a, 1, 0, h0)?;
        g.slice(b, 2, 0, w0)?
    };
    Ok(cropped)
}

/// Reference attention for cross-checking the windowed kernels: tokens
/// are grouped by (rolled window, contiguous source interval) triples
/// per axis, and plain multi-head attention with the relative-position
/// bias runs with loops inside every group, in the original coordinate
/// space. Shifted windows must match this exactly, since masking is
/// what cuts each rolled window back into its contiguous source
/// regions. Returns the output grid and the number of distinct groups.
pub fn naive_region_attention(
    grid: &Tensor<f64>,
    cfg: WindowConfig,
    heads: usize,
    qkv_w: &Tensor<f64>,
    qkv_b: &Tensor<f64>,
    proj_w: &Tensor<f64>,
    proj_b: &Tensor<f64>,
    table: &Tensor<f64>,
) -> (Tensor<f64>, usize) {
    let [t, h, w, c] = grid.dims()[..] else { unreachable!() };
    let (p, m) = (cfg.p, cfg.m);
    let (st, sh, sw) = cfg.shift();
    let hd = c / heads;

    // group key: (window in rolled space, contiguous original interval)
    let axis_key = |o: usize, n: usize, k: usize, s: usize| -> (usize, usize) {
        let r = (o + n - s) % n;
        let interval = if o >= s && o < s + (n - k) {
            0
        } else if o >= s + (n - k) {
            1
        } else {
            2
        };
        (r / k, interval)
    };

    let mut groups: std::collections::BTreeMap<Vec<usize>, Vec<(usize, usize, usize)>> =
        std::collections::BTreeMap::new();
    for ot in 0..t {
        for oh in 0..h {
            for ow in 0..w {
                let (wt, it) = axis_key(ot, t, p, st);
                let (wh, ih) = axis_key(oh, h, m, sh);
                let (ww, iw) = axis_key(ow, w, m, sw);
                groups
                    .entry(vec![wt, wh, ww, it, ih, iw])
                    .or_default()
                    .push((ot, oh, ow));
            }
        }
    }
    let n_groups = groups.len();

    let tok = |t_: usize, h_: usize, w_: usize| ((t_ * h + h_) * w + w_) * c;
    let mut out = Tensor::<f64>::zeros(grid.dims());
    for tokens in groups.values() {
        let nl = tokens.len();
        // qkv per token
        let mut q = vec![0.0; nl * c];
        let mut k = vec![0.0; nl * c];
        let mut v = vec![0.0; nl * c];
        for (i, &(ti, hi, wi)) in tokens.iter().enumerate() {
            let x = &grid.data()[tok(ti, hi, wi)..tok(ti, hi, wi) + c];
            for o in 0..3 * c {
                let mut acc = qkv_b.data()[o];
                for ic in 0..c {
                    acc += x[ic] * qkv_w.data()[ic * 3 * c + o];
                }
                match o / c {
                    0 => q[i * c + o % c] = acc,
                    1 => k[i * c + o % c] = acc,
                    _ => v[i * c + o % c] = acc,
                }
            }
        }
        for (i, &(ti, hi, wi)) in tokens.iter().enumerate() {
            let mut merged = vec![0.0; c];
            for head in 0..heads {
                let hoff = head * hd;
                let mut scores = vec![0.0; nl];
                for (j, &(tj, hj, wj)) in tokens.iter().enumerate() {
                    let mut dot = 0.0;
                    for d in 0..hd {
                        dot += q[i * c + hoff + d] * k[j * c + hoff + d];
                    }
                    let (dt, dh, dw) = (ti + p - 1 - tj, hi + m - 1 - hj, wi + m - 1 - wj);
                    let bias_row = (dt * (2 * m - 1) + dh) * (2 * m - 1) + dw;
                    scores[j] = dot / (hd as f64).sqrt() + table.data()[bias_row * heads + head];
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for e in exps.iter_mut() {
                    *e /= sum;
                }
                for d in 0..hd {
                    let mut acc = 0.0;
                    for (j, &e) in exps.iter().enumerate() {
                        acc += e * v[j * c + hoff + d];
                    }
                    merged[hoff + d] = acc;
                }
            }
            let dst = tok(ti, hi, wi);
            for oc in 0..c {
                let mut acc = proj_b.data()[oc];
                for ic in 0..c {
                    acc += merged[ic] * proj_w.data()[ic * c + oc];
                }
                out.data_mut()[dst + oc] = acc;
            }
        }
    }
    (out, n_groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_grid(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn window_count_eight_cubed() {
        let cfg = WindowConfig::new(4, 4).unwrap();
        let grid = rand_grid(&[8, 8, 8, 2], 1);
        let wins = window_partition(&grid, cfg).unwrap();
        assert_eq!(wins.dims(), &[8, 64, 2]);
    }

    #[test]
    fn single_window_degeneracy_preserves_grid_order() {
        let cfg = WindowConfig::new(2, 3).unwrap();
        let grid = rand_grid(&[2, 3, 3, 1], 2);
        let wins = window_partition(&grid, cfg).unwrap();
        assert_eq!(wins.dims(), &[1, 18, 1]);
        assert_eq!(wins.data(), grid.data());
    }

    #[test]
    fn partition_reverse_roundtrip_bit_exact() {
        let cfg = WindowConfig::new(2, 4).unwrap();
        let grid = rand_grid(&[4, 8, 8, 3], 3);
        let wins = window_partition(&grid, cfg).unwrap();
        let back = window_reverse(&wins, cfg, (4, 8, 8, 3)).unwrap();
        assert!(grid
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn indivisible_dims_are_shape_errors() {
        let cfg = WindowConfig::new(2, 4).unwrap();
        let grid = rand_grid(&[3, 8, 8, 1], 4);
        assert!(matches!(
            window_partition(&grid, cfg),
            Err(Error::Shape(_))
        ));
        let wins = rand_grid(&[4, 32, 1], 5);
        assert!(matches!(
            window_reverse(&wins, cfg, (4, 8, 8, 1)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pad_examples_and_roundtrip() {
        let cfg = WindowConfig::new(2, 4).unwrap();
        assert_eq!(padded_dims(3, 5, 5, cfg), (4, 8, 8));
        let grid = rand_grid(&[3, 5, 5, 2], 6);
        let (padded, orig) = pad_to_window(&grid, cfg).unwrap();
        assert_eq!(padded.dims(), &[4, 8, 8, 2]);
        let back = crop_grid(&padded, orig).unwrap();
        assert_eq!(back.data(), grid.data());

        // already divisible: identity
        let exact = rand_grid(&[2, 4, 4, 1], 7);
        let (same, _) = pad_to_window(&exact, cfg).unwrap();
        assert_eq!(same.data(), exact.data());
    }

    #[test]
    fn cyclic_shift_identities() {
        let grid = rand_grid(&[3, 4, 5, 2], 8);
        let zero = cyclic_shift(&grid, (0, 0, 0)).unwrap();
        assert_eq!(zero.data(), grid.data());
        let full = cyclic_shift(&grid, (3, 4, 5)).unwrap();
        assert_eq!(full.data(), grid.data());
        let there = cyclic_shift(&grid, (1, -2, 3)).unwrap();
        let back = cyclic_shift(&there, (-1, 2, -3)).unwrap();
        assert_eq!(back.data(), grid.data());
    }

    #[test]
    fn cyclic_shift_is_a_permutation() {
        let grid = rand_grid(&[2, 3, 4, 1], 9);
        let rolled = cyclic_shift(&grid, (1, 2, -1)).unwrap();
        let mut a: Vec<u64> = grid.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = rolled.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_ne!(grid.data(), rolled.data());
    }

    #[test]
    fn graph_shift_matches_tensor_shift() {
        let grid = rand_grid(&[3, 4, 5, 2], 10);
        let want = cyclic_shift(&grid, (-1, 2, -2)).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input(grid);
        let y = cyclic_shift_node(&mut g, x, (-1, 2, -2)).unwrap();
        assert_eq!(g.value(y).data(), want.data());
    }

    #[test]
    fn unshifted_divisible_mask_is_all_zero() {
        let cfg = WindowConfig::new(2, 4).unwrap();
        let mask: Tensor<f64> = attention_mask((4, 8, 8), (4, 8, 8), cfg, false).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_mask_row_lets_the_token_attend_to_itself() {
        let cfg = WindowConfig::new(2, 4).unwrap();
        let mask: Tensor<f64> = attention_mask((3, 6, 7), (4, 8, 8), cfg, true).unwrap();
        let [n, l, _] = mask.dims()[..] else { unreachable!() };
        for wi in 0..n {
            for i in 0..l {
                assert_eq!(mask.data()[(wi * l + i) * l + i], 0.0, "window {} row {}", wi, i);
            }
        }
    }

    #[test]
    fn padding_tokens_are_isolated_from_real_ones() {
        // 1 real frame padded to 2: window pairs real<->pad must be blocked
        let cfg = WindowConfig::new(2, 2).unwrap();
        let mask: Tensor<f64> = attention_mask((1, 2, 2), (2, 2, 2), cfg, false).unwrap();
        let l = cfg.window_len();
        // tokens 0..4 are frame 0 (real), 4..8 frame 1 (padding)
        for i in 0..4 {
            for j in 4..8 {
                assert_eq!(mask.data()[i * l + j], MASK_NEG);
                assert_eq!(mask.data()[j * l + i], MASK_NEG);
            }
            for j in 0..4 {
                assert_eq!(mask.data()[i * l + j], 0.0);
            }
        }
    }

    #[test]
    fn shifted_mask_has_27_regions_on_the_figure_case() {
        let cfg = WindowConfig::new(4, 4).unwrap();
        let (st, sh, sw) = cfg.shift();
        let (t, h, w) = (8usize, 8usize, 8usize);
        let mut distinct = std::collections::BTreeSet::new();
        for rt in 0..t {
            for rh in 0..h {
                for rw in 0..w {
                    let id = (axis_region(rt, t, cfg.p, st) * 3
                        + axis_region(rh, h, cfg.m, sh))
                        * 3
                        + axis_region(rw, w, cfg.m, sw);
                    distinct.insert(id);
                }
            }
        }
        assert_eq!(distinct.len(), 27);
    }

    fn rand_attn(g: &mut Graph<f64>, c: usize, heads: usize, cfg: WindowConfig, seed: u64) -> AttnNodes {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut mk = |dims: &[usize], lo: f64, hi: f64| {
            let n: usize = dims.iter().product();
            Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
        };
        let qkv_w = mk(&[c, 3 * c], -0.4, 0.4);
        let qkv_b = mk(&[3 * c], -0.1, 0.1);
        let proj_w = mk(&[c, c], -0.4, 0.4);
        let proj_b = mk(&[c], -0.1, 0.1);
        let table = mk(&[bias_table_rows(cfg), heads], -0.2, 0.2);
        AttnNodes {
            qkv_w: g.constant(qkv_w),
            qkv_b: g.constant(qkv_b),
            proj_w: g.constant(proj_w),
            proj_b: g.constant(proj_b),
            bias_table: g.constant(table),
            heads,
        }
    }

    #[test]
    fn shifted_attention_equals_naive_27_region_oracle() {
        let cfg = WindowConfig::new(4, 4).unwrap();
        let (c, heads) = (4usize, 2usize);
        let grid = rand_grid(&[8, 8, 8, c], 11);
        let mut g = Graph::<f64>::new();
        let x = g.input(grid.clone());
        let attn = rand_attn(&mut g, c, heads, cfg, 12);
        let y = windowed_attention(&mut g, x, &attn, cfg, true).unwrap();

        let (want, n_groups) = naive_region_attention(
            &grid,
            cfg,
            heads,
            g.value(attn.qkv_w),
            g.value(attn.qkv_b),
            g.value(attn.proj_w),
            g.value(attn.proj_b),
            g.value(attn.bias_table),
        );
        assert_eq!(n_groups, 27);
        let max_diff = g
            .value(y)
            .data()
            .iter()
            .zip(want.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-5, "max abs diff {}", max_diff);
    }

    #[test]
    fn uniform_attention_degenerates_to_window_mean() {
        // zero q/k weights -> uniform probabilities; identity v and output
        // projections -> each token becomes the mean of its window's tokens
        let cfg = WindowConfig::new(2, 2).unwrap();
        let c = 3usize;
        let mut g = Graph::<f64>::new();
        let grid = rand_grid(&[2, 2, 2, c], 13);
        let x = g.input(grid.clone());

        let mut qkv_w = Tensor::<f64>::zeros(&[c, 3 * c]);
        for i in 0..c {
            qkv_w.data_mut()[i * 3 * c + 2 * c + i] = 1.0; // v block = identity
        }
        let mut proj_w = Tensor::<f64>::zeros(&[c, c]);
        for i in 0..c {
            proj_w.data_mut()[i * c + i] = 1.0;
        }
        let attn = AttnNodes {
            qkv_w: g.constant(qkv_w),
            qkv_b: g.constant(Tensor::zeros(&[3 * c])),
            proj_w: g.constant(proj_w),
            proj_b: g.constant(Tensor::zeros(&[c])),
            bias_table: g.constant(Tensor::zeros(&[bias_table_rows(cfg), 1])),
            heads: 1,
        };
        let y = windowed_attention(&mut g, x, &attn, cfg, false).unwrap();
        let mut mean = [0.0; 3];
        for tok in 0..8 {
            for ch in 0..c {
                mean[ch] += grid.data()[tok * c + ch] / 8.0;
            }
        }
        for tok in 0..8 {
            for ch in 0..c {
                assert!((g.value(y).data()[tok * c + ch] - mean[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_windows_are_identity_up_to_projections() {
        let cfg = WindowConfig::new(1, 1).unwrap();
        let c = 2usize;
        let mut g = Graph::<f64>::new();
        let grid = rand_grid(&[2, 2, 2, c], 14);
        let x = g.input(grid.clone());
        let mut qkv_w = Tensor::<f64>::zeros(&[c, 3 * c]);
        for i in 0..c {
            qkv_w.data_mut()[i * 3 * c + 2 * c + i] = 1.0;
        }
        let mut proj_w = Tensor::<f64>::zeros(&[c, c]);
        for i in 0..c {
            proj_w.data_mut()[i * c + i] = 1.0;
        }
        let attn = AttnNodes {
            qkv_w: g.constant(qkv_w),
            qkv_b: g.constant(Tensor::zeros(&[3 * c])),
            proj_w: g.constant(proj_w),
            proj_b: g.constant(Tensor::zeros(&[c])),
            bias_table: g.constant(Tensor::zeros(&[bias_table_rows(cfg), 1])),
            heads: 1,
        };
        let y = windowed_attention(&mut g, x, &attn, cfg, false).unwrap();
        assert_eq!(g.value(y).data(), grid.data());
    }

    #[test]
    fn attention_rows_sum_to_one_under_mask() {
        // softmax over scores + mask: rows with an unmasked entry sum to 1
        let cfg = WindowConfig::new(2, 2).unwrap();
        let mask: Tensor<f64> = attention_mask((2, 3, 3), (2, 4, 4), cfg, true).unwrap();
        let [n, l, _] = mask.dims()[..] else { unreachable!() };
        let mut g = Graph::<f64>::new();
        let scores = g.input(rand_grid(&[n, l, l], 15));
        let masked = g.masked_add(scores, mask).unwrap();
        let probs = g.softmax(masked).unwrap();
        for row in g.value(probs).data().chunks(l) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let cfg = WindowConfig::new(2, 2).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 8, 3]));
        let attn = rand_attn(&mut g, 3, 2, cfg, 16);
        assert!(matches!(
            w_msa(&mut g, x, &attn, cfg, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn w_msa_gradients_pass_finite_differences() {
        use crate::diffcore::gradcheck;
        let cfg = WindowConfig::new(2, 2).unwrap();
        let (c, heads) = (4usize, 2usize);
        let rows = bias_table_rows(cfg);
        let r = gradcheck::check(
            "w_msa",
            3,
            1e-4,
            Some(12),
            |rng| {
                let mut mk = |dims: &[usize]| {
                    let n: usize = dims.iter().product();
                    Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
                        .unwrap()
                };
                vec![
                    mk(&[2, 8, c]),
                    mk(&[c, 3 * c]),
                    mk(&[3 * c]),
                    mk(&[c, c]),
                    mk(&[c]),
                    mk(&[rows, heads]),
                ]
            },
            |g, ids| {
                let attn = AttnNodes {
                    qkv_w: ids[1],
                    qkv_b: ids[2],
                    proj_w: ids[3],
                    proj_b: ids[4],
                    bias_table: ids[5],
                    heads,
                };
                let y = w_msa(g, ids[0], &attn, cfg, None)?;
                let n = 2 * 8 * c;
                let wts =
                    Tensor::from_vec(&[2, 8, c], (0..n).map(|i| 0.5 + 0.01 * i as f64).collect())
                        .unwrap();
                let wn = g.constant(wts);
                let prod = g.mul(y, wn)?;
                Ok(g.sum_all(prod))
            },
        );
        assert!(r.pass, "{}", r);
    }
}
