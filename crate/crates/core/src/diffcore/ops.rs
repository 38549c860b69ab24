//! Forward and backward kernels for the primitive set. Pure tensor-level
//! functions; the graph in the parent module wires them together.
//!
//! Layout conventions: conv/pool/norm kernels operate on NCHW; linear and
//! the row-wise ops (layer norm, softmax) treat the last axis as features.

use crate::error::{Error, Result};
use crate::tensor::{num_elems, Scalar, Tensor};

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize, usize)> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::Shape(format!(
            "{} expects rank-4 NCHW input, got {:?}",
            what, d
        )));
    }
    Ok((d[0], d[1], d[2], d[3]))
}

// ---- dense / matmul ----

/// x (..., IN) @ w (IN, OUT) + b (OUT).
pub fn linear_fwd<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (wi, wo) = match w.dims() {
        [i, o] => (*i, *o),
        d => return Err(Error::Shape(format!("linear weight must be rank 2, got {:?}", d))),
    };
    let xin = *x.dims().last().ok_or_else(|| Error::Shape("linear input rank 0".into()))?;
    if xin != wi {
        return Err(Error::Shape(format!(
            "linear input features {} do not match weight {:?}",
            xin,
            w.dims()
        )));
    }
    if b.dims() != [wo] {
        return Err(Error::Shape(format!(
            "linear bias must be [{}], got {:?}",
            wo,
            b.dims()
        )));
    }
    let rows = x.len() / wi;
    let mut out = vec![S::zero(); rows * wo];
    for r in 0..rows {
        let y = &mut out[r * wo..(r + 1) * wo];
        y.copy_from_slice(b.data());
        let xr = &x.data()[r * wi..(r + 1) * wi];
        for (i, &xv) in xr.iter().enumerate() {
            let wrow = &w.data()[i * wo..(i + 1) * wo];
            for (yv, &wv) in y.iter_mut().zip(wrow) {
                *yv += xv * wv;
            }
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = wo;
    Tensor::from_vec(&dims, out)
}

pub fn linear_bwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (wi, wo) = (w.dims()[0], w.dims()[1]);
    let rows = x.len() / wi;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); wo];
    for r in 0..rows {
        let dyr = &dy.data()[r * wo..(r + 1) * wo];
        let xr = &x.data()[r * wi..(r + 1) * wi];
        for (dbv, &gv) in db.iter_mut().zip(dyr) {
            *dbv += gv;
        }
        let dxr = &mut dx[r * wi..(r + 1) * wi];
        for i in 0..wi {
            let wrow = &w.data()[i * wo..(i + 1) * wo];
            let mut acc = S::zero();
            for (&gv, &wv) in dyr.iter().zip(wrow) {
                acc += gv * wv;
            }
            dxr[i] = acc;
            let dwrow = &mut dw[i * wo..(i + 1) * wo];
            let xv = xr[i];
            for (dwv, &gv) in dwrow.iter_mut().zip(dyr) {
                *dwv += xv * gv;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), dx)?,
        Tensor::from_vec(w.dims(), dw)?,
        Tensor::from_vec(&[wo], db)?,
    ))
}

/// Batched a (..., M, K) @ b (..., K, N); leading dims must match exactly.
pub fn matmul_fwd<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || rb < 2 || ra != rb || a.dims()[..ra - 2] != b.dims()[..rb - 2] {
        return Err(Error::Shape(format!(
            "matmul needs equal leading dims, got {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (m, k) = (a.dims()[ra - 2], a.dims()[ra - 1]);
    let (kb, n) = (b.dims()[rb - 2], b.dims()[rb - 1]);
    if k != kb {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let batch: usize = a.dims()[..ra - 2].iter().product();
    let mut out = vec![S::zero(); batch * m * n];
    for t in 0..batch {
        let abase = t * m * k;
        let bbase = t * k * n;
        let obase = t * m * n;
        for i in 0..m {
            let orow = &mut out[obase + i * n..obase + (i + 1) * n];
            for l in 0..k {
                let av = a.data()[abase + i * k + l];
                let brow = &b.data()[bbase + l * n..bbase + (l + 1) * n];
                for (ov, &bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
    let mut dims = a.dims().to_vec();
    dims[ra - 2] = m;
    dims[ra - 1] = n;
    Tensor::from_vec(&dims, out)
}

pub fn matmul_bwd<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let ra = a.rank();
    let (m, k) = (a.dims()[ra - 2], a.dims()[ra - 1]);
    let n = b.dims()[ra - 1];
    let batch: usize = a.dims()[..ra - 2].iter().product();
    let mut da = vec![S::zero(); a.len()];
    let mut db = vec![S::zero(); b.len()];
    for t in 0..batch {
        let abase = t * m * k;
        let bbase = t * k * n;
        let obase = t * m * n;
        for i in 0..m {
            let dyrow = &dy.data()[obase + i * n..obase + (i + 1) * n];
            for l in 0..k {
                let brow = &b.data()[bbase + l * n..bbase + (l + 1) * n];
                let mut acc = S::zero();
                for (&gv, &bv) in dyrow.iter().zip(brow) {
                    acc += gv * bv;
                }
                da[abase + i * k + l] = acc;
                let av = a.data()[abase + i * k + l];
                let dbrow = &mut db[bbase + l * n..bbase + (l + 1) * n];
                for (dbv, &gv) in dbrow.iter_mut().zip(dyrow) {
                    *dbv += av * gv;
                }
            }
        }
    }
    Ok((Tensor::from_vec(a.dims(), da)?, Tensor::from_vec(b.dims(), db)?))
}

// ---- convolution ----

/// 3x3 stride-1 same-padding convolution: x (N,C,H,W), w (O,C,3,3), b (O).
pub fn conv2d_fwd<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, wd) = dims4(x, "conv2d")?;
    let (o, ci, kh, kw) = dims4(w, "conv2d weight")?;
    if ci != c || kh != 3 || kw != 3 {
        return Err(Error::Shape(format!(
            "conv2d weight must be (O,{},3,3), got {:?}",
            c,
            w.dims()
        )));
    }
    if b.dims() != [o] {
        return Err(Error::Shape(format!("conv2d bias must be [{}], got {:?}", o, b.dims())));
    }
    let mut out = vec![S::zero(); n * o * h * wd];
    for in_ in 0..n {
        for oc in 0..o {
            let bias = b.data()[oc];
            let ob = (in_ * o + oc) * h * wd;
            out[ob..ob + h * wd].fill(bias);
            for ic in 0..c {
                let xb = (in_ * c + ic) * h * wd;
                for u in 0..3usize {
                    for v in 0..3usize {
                        let kv = w.data()[((oc * c + ic) * 3 + u) * 3 + v];
                        if kv == S::zero() {
                            continue;
                        }
                        // output row i reads input row i + u - 1
                        let (i0, i1) = match u {
                            0 => (1, h),
                            1 => (0, h),
                            _ => (0, h.saturating_sub(1)),
                        };
                        for i in i0..i1 {
                            let r = i + u - 1;
                            let yrow = ob + i * wd;
                            let xrow = xb + r * wd;
                            match v {
                                0 => {
                                    for j in 1..wd {
                                        out[yrow + j] += kv * x.data()[xrow + j - 1];
                                    }
                                }
                                1 => {
                                    for j in 0..wd {
                                        out[yrow + j] += kv * x.data()[xrow + j];
                                    }
                                }
                                _ => {
                                    for j in 0..wd.saturating_sub(1) {
                                        out[yrow + j] += kv * x.data()[xrow + j + 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, h, wd], out)
}

pub fn conv2d_bwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, wd) = dims4(x, "conv2d")?;
    let o = w.dims()[0];
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); o];
    for in_ in 0..n {
        for oc in 0..o {
            let ob = (in_ * o + oc) * h * wd;
            let mut bacc = S::zero();
            for &gv in &dy.data()[ob..ob + h * wd] {
                bacc += gv;
            }
            db[oc] += bacc;
            for ic in 0..c {
                let xb = (in_ * c + ic) * h * wd;
                for u in 0..3usize {
                    let (i0, i1) = match u {
                        0 => (1, h),
                        1 => (0, h),
                        _ => (0, h.saturating_sub(1)),
                    };
                    for v in 0..3usize {
                        let widx = ((oc * c + ic) * 3 + u) * 3 + v;
                        let kv = w.data()[widx];
                        let mut wacc = S::zero();
                        for i in i0..i1 {
                            let r = i + u - 1;
                            let yrow = ob + i * wd;
                            let xrow = xb + r * wd;
                            match v {
                                0 => {
                                    for j in 1..wd {
                                        let gv = dy.data()[yrow + j];
                                        wacc += gv * x.data()[xrow + j - 1];
                                        dx[xrow + j - 1] += kv * gv;
                                    }
                                }
                                1 => {
                                    for j in 0..wd {
                                        let gv = dy.data()[yrow + j];
                                        wacc += gv * x.data()[xrow + j];
                                        dx[xrow + j] += kv * gv;
                                    }
                                }
                                _ => {
                                    for j in 0..wd.saturating_sub(1) {
                                        let gv = dy.data()[yrow + j];
                                        wacc += gv * x.data()[xrow + j + 1];
                                        dx[xrow + j + 1] += kv * gv;
                                    }
                                }
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), dx)?,
        Tensor::from_vec(w.dims(), dw)?,
        Tensor::from_vec(&[o], db)?,
    ))
}

// ---- normalization ----

/// Training-mode batch norm over (N,H,W) per channel. Returns
/// (y, mean, biased variance, inv_std).
pub fn batchnorm_train_fwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = dims4(x, "batch_norm")?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm gamma/beta must be [{}], got {:?} and {:?}",
            c,
            gamma.dims(),
            beta.dims()
        )));
    }
    let m = n * h * w;
    let plane = h * w;
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ch in 0..c {
        let mut acc = S::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                acc += v;
            }
        }
        let mu = acc / S::from_f64(m as f64);
        let mut vacc = S::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for &v in &x.data()[base..base + plane] {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = vacc / S::from_f64(m as f64);
    }
    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::one() / (v + S::from_f64(eps)).sqrt())
        .collect();
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for (ov, &xv) in out[base..base + plane].iter_mut().zip(&x.data()[base..base + plane]) {
                *ov = (xv - mu) * is * g + be;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), out)?,
        Tensor::from_vec(&[c], mean)?,
        Tensor::from_vec(&[c], var)?,
        Tensor::from_vec(&[c], inv_std)?,
    ))
}

pub fn batchnorm_train_bwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &Tensor<S>,
    inv_std: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = dims4(x, "batch_norm")?;
    let plane = h * w;
    let m = S::from_f64((n * plane) as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for ch in 0..c {
        let (mu, is) = (mean.data()[ch], inv_std.data()[ch]);
        let mut sum_dy = S::zero();
        let mut sum_dy_xhat = S::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in 0..plane {
                let g = dy.data()[base + i];
                let xhat = (x.data()[base + i] - mu) * is;
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let gm = gamma.data()[ch] * is;
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for i in 0..plane {
                let g = dy.data()[base + i];
                let xhat = (x.data()[base + i] - mu) * is;
                dx[base + i] = gm * (g - mean_dy - xhat * mean_dy_xhat);
            }
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Inference-mode batch norm using fixed running statistics.
pub fn batchnorm_infer_fwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "batch_norm")?;
    if gamma.dims() != [c] || beta.dims() != [c] || mean.dims() != [c] || var.dims() != [c] {
        return Err(Error::Shape(format!(
            "batch_norm parameter dims must all be [{}]",
            c
        )));
    }
    let plane = h * w;
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let is = S::one() / (var.data()[ch] + S::from_f64(eps)).sqrt();
            let (mu, g, be) = (mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            for (ov, &xv) in out[base..base + plane].iter_mut().zip(&x.data()[base..base + plane]) {
                *ov = (xv - mu) * is * g + be;
            }
        }
    }
    Tensor::from_vec(x.dims(), out)
}

pub fn batchnorm_infer_bwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: f64,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, c, h, w) = dims4(x, "batch_norm")?;
    let plane = h * w;
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let is = S::one() / (var.data()[ch] + S::from_f64(eps)).sqrt();
            let (mu, g) = (mean.data()[ch], gamma.data()[ch]);
            for i in 0..plane {
                let gv = dy.data()[base + i];
                dx[base + i] = gv * g * is;
                dgamma[ch] += gv * (x.data()[base + i] - mu) * is;
                dbeta[ch] += gv;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}

/// Layer norm over the last axis. Returns (y, mean, inv_std) with the stats
/// shaped (rows,).
pub fn layernorm_fwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = *x.dims().last().ok_or_else(|| Error::Shape("layer_norm rank 0".into()))?;
    if gamma.dims() != [d] || beta.dims() != [d] {
        return Err(Error::Shape(format!(
            "layer_norm gamma/beta must be [{}], got {:?} and {:?}",
            d,
            gamma.dims(),
            beta.dims()
        )));
    }
    let rows = x.len() / d;
    let mut out = vec![S::zero(); x.len()];
    let mut means = vec![S::zero(); rows];
    let mut inv_stds = vec![S::zero(); rows];
    let dn = S::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mut acc = S::zero();
        for &v in xr {
            acc += v;
        }
        let mu = acc / dn;
        let mut vacc = S::zero();
        for &v in xr {
            let dv = v - mu;
            vacc += dv * dv;
        }
        let is = S::one() / (vacc / dn + S::from_f64(eps)).sqrt();
        means[r] = mu;
        inv_stds[r] = is;
        let orow = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            orow[i] = (xr[i] - mu) * is * gamma.data()[i] + beta.data()[i];
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), out)?,
        Tensor::from_vec(&[rows], means)?,
        Tensor::from_vec(&[rows], inv_stds)?,
    ))
}

pub fn layernorm_bwd<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &Tensor<S>,
    inv_std: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let d = *x.dims().last().unwrap();
    let rows = x.len() / d;
    let dn = S::from_f64(d as f64);
    let mut dx = vec![S::zero(); x.len()];
    let mut dgamma = vec![S::zero(); d];
    let mut dbeta = vec![S::zero(); d];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let dyr = &dy.data()[r * d..(r + 1) * d];
        let (mu, is) = (mean.data()[r], inv_std.data()[r]);
        let mut s1 = S::zero(); // sum of dy*gamma
        let mut s2 = S::zero(); // sum of dy*gamma*xhat
        for i in 0..d {
            let xhat = (xr[i] - mu) * is;
            let dg = dyr[i] * gamma.data()[i];
            s1 += dg;
            s2 += dg * xhat;
            dgamma[i] += dyr[i] * xhat;
            dbeta[i] += dyr[i];
        }
        let (m1, m2) = (s1 / dn, s2 / dn);
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - mu) * is;
            dxr[i] = is * (dyr[i] * gamma.data()[i] - m1 - xhat * m2);
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), dx)?,
        Tensor::from_vec(&[d], dgamma)?,
        Tensor::from_vec(&[d], dbeta)?,
    ))
}

// ---- softmax ----

/// Softmax over the last axis (max-subtracted for stability).
pub fn softmax_fwd<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let d = *x.dims().last().ok_or_else(|| Error::Shape("softmax rank 0".into()))?;
    let rows = x.len() / d;
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mut mx = xr[0];
        for &v in xr {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[r * d..(r + 1) * d];
        let mut sum = S::zero();
        for i in 0..d {
            let e = (xr[i] - mx).exp();
            orow[i] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_vec(x.dims(), out)
}

pub fn softmax_bwd<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    let d = *y.dims().last().unwrap();
    let rows = y.len() / d;
    let mut dx = vec![S::zero(); y.len()];
    for r in 0..rows {
        let yr = &y.data()[r * d..(r + 1) * d];
        let dyr = &dy.data()[r * d..(r + 1) * d];
        let mut dot = S::zero();
        for i in 0..d {
            dot += yr[i] * dyr[i];
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    Tensor::from_vec(y.dims(), dx)
}

// ---- pooling and windowed filters ----

/// 2x2 stride-2 average pool with floor semantics on (N,C,H,W).
pub fn avgpool2_fwd<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "avg_pool2")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Size(format!("cannot pool {}x{} frames", h, w)));
    }
    let q = S::from_f64(0.25);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let base = xb + 2 * i * w + 2 * j;
                out[ob + i * ow + j] =
                    (x.data()[base] + x.data()[base + 1] + x.data()[base + w] + x.data()[base + w + 1]) * q;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn avgpool2_bwd<S: Scalar>(x_dims: &[usize], dy: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let (oh, ow) = (h / 2, w / 2);
    let q = S::from_f64(0.25);
    let mut dx = vec![S::zero(); num_elems(x_dims)];
    for p in 0..n * c {
        let xb = p * h * w;
        let ob = p * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let g = dy.data()[ob + i * ow + j] * q;
                let base = xb + 2 * i * w + 2 * j;
                dx[base] += g;
                dx[base + 1] += g;
                dx[base + w] += g;
                dx[base + w + 1] += g;
            }
        }
    }
    Tensor::from_vec(x_dims, dx)
}

/// Depthwise valid-mode separable convolution with a fixed (non-learned)
/// window, used by the SSIM loss path. Output is (N,C,H-k+1,W-k+1).
pub fn gaussconv2d_fwd<S: Scalar>(x: &Tensor<S>, window: &[S]) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "gauss_conv2d")?;
    let k = window.len();
    if k == 0 || h < k || w < k {
        return Err(Error::Size(format!(
            "gauss_conv2d window {} does not fit {}x{} frames",
            k, h, w
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = vec![S::zero(); n * c * oh * ow];
    let mut mid = vec![S::zero(); h * ow];
    for p in 0..n * c {
        let xb = p * h * w;
        // horizontal pass
        for y in 0..h {
            for xo in 0..ow {
                let mut acc = S::zero();
                for (i, &kv) in window.iter().enumerate() {
                    acc += kv * x.data()[xb + y * w + xo + i];
                }
                mid[y * ow + xo] = acc;
            }
        }
        // vertical pass
        let ob = p * oh * ow;
        for yo in 0..oh {
            for xo in 0..ow {
                let mut acc = S::zero();
                for (j, &kv) in window.iter().enumerate() {
                    acc += kv * mid[(yo + j) * ow + xo];
                }
                out[ob + yo * ow + xo] = acc;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn gaussconv2d_bwd<S: Scalar>(
    x_dims: &[usize],
    window: &[S],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let k = window.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut dx = vec![S::zero(); num_elems(x_dims)];
    let mut dmid = vec![S::zero(); h * ow];
    for p in 0..n * c {
        let ob = p * oh * ow;
        dmid.iter_mut().for_each(|v| *v = S::zero());
        // transpose of the vertical pass
        for yo in 0..oh {
            for xo in 0..ow {
                let g = dy.data()[ob + yo * ow + xo];
                for (j, &kv) in window.iter().enumerate() {
                    dmid[(yo + j) * ow + xo] += kv * g;
                }
            }
        }
        // transpose of the horizontal pass
        let xb = p * h * w;
        for y in 0..h {
            for xo in 0..ow {
                let g = dmid[y * ow + xo];
                for (i, &kv) in window.iter().enumerate() {
                    dx[xb + y * w + xo + i] += kv * g;
                }
            }
        }
    }
    Tensor::from_vec(x_dims, dx)
}

// ---- gather ----

/// Select rows of a (R, C) table: out[i, :] = table[idx[i], :].
pub fn gather_rows_fwd<S: Scalar>(table: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    let (r, c) = match table.dims() {
        [r, c] => (*r, *c),
        d => return Err(Error::Shape(format!("gather table must be rank 2, got {:?}", d))),
    };
    let mut out = vec![S::zero(); idx.len() * c];
    for (i, &row) in idx.iter().enumerate() {
        if row >= r {
            return Err(Error::Index(format!("gather row {} out of 0..{}", row, r)));
        }
        out[i * c..(i + 1) * c].copy_from_slice(&table.data()[row * c..(row + 1) * c]);
    }
    Tensor::from_vec(&[idx.len(), c], out)
}

pub fn gather_rows_bwd<S: Scalar>(
    table_dims: &[usize],
    idx: &[usize],
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let c = table_dims[1];
    let mut dt = vec![S::zero(); num_elems(table_dims)];
    for (i, &row) in idx.iter().enumerate() {
        let drow = &mut dt[row * c..(row + 1) * c];
        for (dv, &gv) in drow.iter_mut().zip(&dy.data()[i * c..(i + 1) * c]) {
            *dv += gv;
        }
    }
    Tensor::from_vec(table_dims, dt)
}

// ---- elementwise activations ----

pub fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
