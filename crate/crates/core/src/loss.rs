//! Differentiable training loss assembled from graph primitives.
//!
//! These mirror the plain-tensor evaluation metrics in [`crate::metrics`];
//! the two are cross-checked in tests. All functions take batched frames in
//! (N, C, H, W) layout and return a scalar graph node.

use crate::diffcore::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::metrics::{LossWeights, SsimParams, MSE_EPS};
use crate::tensor::Scalar;

fn check_pair<S: Scalar>(g: &Graph<S>, pred: NodeId, target: NodeId) -> Result<(usize, usize)> {
    let pd = g.dims(pred);
    let td = g.dims(target);
    if pd != td {
        return Err(Error::Shape(format!(
            "prediction dims {:?} do not match target dims {:?}",
            pd, td
        )));
    }
    match pd {
        [_, _, h, w] => Ok((*h, *w)),
        other => Err(Error::Shape(format!(
            "loss expects (N, C, H, W) frames, got {:?}",
            other
        ))),
    }
}

/// Mean absolute error.
pub fn l1_node<S: Scalar>(g: &mut Graph<S>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    check_pair(g, pred, target)?;
    let diff = g.sub(pred, target)?;
    let mag = g.abs(diff);
    Ok(g.mean_all(mag))
}

/// Mean squared error.
pub fn mse_node<S: Scalar>(g: &mut Graph<S>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    check_pair(g, pred, target)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// log10(MAX^2 / max(MSE, eps)); the dB factor of 10 is deliberately absent,
/// matching [`crate::metrics::psnr_loss`].
pub fn psnr_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    max_value: f64,
) -> Result<NodeId> {
    if !(max_value > 0.0) {
        return Err(Error::Config(format!(
            "max_value must be positive, got {}",
            max_value
        )));
    }
    let e = mse_node(g, pred, target)?;
    let clamped = g.clamp_min(e, MSE_EPS);
    let ln = g.ln(clamped);
    let log10 = g.scale(ln, -1.0 / std::f64::consts::LN_10);
    Ok(g.add_scalar(log10, 2.0 * max_value.log10()))
}

/// One SSIM scale: returns (mean of l*cs, mean of cs).
fn ssim_scale<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    y: NodeId,
    params: &SsimParams,
) -> Result<(NodeId, NodeId)> {
    let win = crate::metrics::gaussian_window();
    let c1 = params.c1();
    let c2 = params.c2();

    let mu_x = g.gauss_conv2d(x, &win)?;
    let mu_y = g.gauss_conv2d(y, &win)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = g.gauss_conv2d(xx, &win)?;
    let eyy = g.gauss_conv2d(yy, &win)?;
    let exy = g.gauss_conv2d(xy, &win)?;
    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let sxx = g.sub(exx, mu_xx)?;
    let syy = g.sub(eyy, mu_yy)?;
    let sxy = g.sub(exy, mu_xy)?;

    let l_num = {
        let two = g.scale(mu_xy, 2.0);
        g.add_scalar(two, c1)
    };
    let l_den = {
        let s = g.add(mu_xx, mu_yy)?;
        g.add_scalar(s, c1)
    };
    let l_map = g.div(l_num, l_den)?;

    let cs_num = {
        let two = g.scale(sxy, 2.0);
        g.add_scalar(two, c2)
    };
    let cs_den = {
        let s = g.add(sxx, syy)?;
        g.add_scalar(s, c2)
    };
    let cs_map = g.div(cs_num, cs_den)?;

    let lcs = g.mul(l_map, cs_map)?;
    Ok((g.mean_all(lcs), g.mean_all(cs_map)))
}

/// Single-frame multi-scale SSIM: contrast-structure means at every scale
/// but the coarsest, l*cs at the coarsest, multiplied together. Downsampling
/// between scales is 2x average pooling.
fn ms_ssim_single<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    params: &SsimParams,
) -> Result<NodeId> {
    let mut x = pred;
    let mut y = target;
    let mut acc: Option<NodeId> = None;
    for scale in 0..params.m_scales {
        if scale > 0 {
            x = g.avg_pool2(x)?;
            y = g.avg_pool2(y)?;
        }
        let last = scale + 1 == params.m_scales;
        let (lcs_mean, cs_mean) = ssim_scale(g, x, y, params)?;
        let factor = if last { lcs_mean } else { cs_mean };
        acc = Some(match acc {
            None => factor,
            Some(prev) => g.mul(prev, factor)?,
        });
    }
    Ok(acc.expect("m_scales >= 1 after validate"))
}

/// Multi-scale SSIM averaged over (N, C) frames, matching
/// [`crate::metrics::ms_ssim_batched`].
pub fn ms_ssim_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    params: &SsimParams,
) -> Result<NodeId> {
    params.validate()?;
    let (h, w) = check_pair(g, pred, target)?;
    let supported = SsimParams::max_scales_for(h, w);
    if params.m_scales > supported {
        return Err(Error::Size(format!(
            "{} scales need at least {}x{} pixels at the coarsest level; ({}, {}) supports {}",
            params.m_scales,
            crate::metrics::SSIM_WINDOW,
            crate::metrics::SSIM_WINDOW,
            h,
            w,
            supported
        )));
    }
    let dims = g.dims(pred).to_vec();
    let frames = dims[0] * dims[1];
    let xs = g.reshape(pred, &[frames, 1, h, w])?;
    let ys = g.reshape(target, &[frames, 1, h, w])?;
    let mut total: Option<NodeId> = None;
    for f in 0..frames {
        let fx = g.slice(xs, 0, f, 1)?;
        let fy = g.slice(ys, 0, f, 1)?;
        let one = ms_ssim_single(g, fx, fy, params)?;
        total = Some(match total {
            None => one,
            Some(prev) => g.add(prev, one)?,
        });
    }
    let sum = total.expect("at least one frame");
    Ok(g.scale(sum, 1.0 / frames as f64))
}

/// The composite training objective:
/// -alpha * psnr_loss + (1 - alpha) * (beta * (1 - ms_ssim) + (1 - beta) * l1).
pub fn composite_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    weights: LossWeights,
    params: &SsimParams,
) -> Result<NodeId> {
    weights.validate()?;
    let psnr = psnr_loss_node(g, pred, target, params.max_value)?;
    let neg_psnr = g.scale(psnr, -weights.alpha);

    let rest = if weights.alpha == 1.0 {
        None
    } else {
        let ms_part = if weights.beta == 0.0 {
            None
        } else {
            let ms = ms_ssim_node(g, pred, target, params)?;
            let neg = g.scale(ms, -1.0);
            let one_minus = g.add_scalar(neg, 1.0);
            Some(g.scale(one_minus, (1.0 - weights.alpha) * weights.beta))
        };
        let l1_part = if weights.beta == 1.0 {
            None
        } else {
            let l1 = l1_node(g, pred, target)?;
            Some(g.scale(l1, (1.0 - weights.alpha) * (1.0 - weights.beta)))
        };
        match (ms_part, l1_part) {
            (Some(a), Some(b)) => Some(g.add(a, b)?),
            (Some(a), None) | (None, Some(a)) => Some(a),
            (None, None) => None,
        }
    };
    match rest {
        Some(r) => g.add(neg_psnr, r),
        None => Ok(neg_psnr),
    }
}
