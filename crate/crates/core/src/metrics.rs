//! Evaluation metrics and the scalar form of the training loss.
//!
//! The loss combines negative PSNR, MS-SSIM, and L1. The PSNR term here is
//! the bare log10 ratio (no factor of 10); [`psnr_db`] is the conventional
//! decibel metric used for reporting. Everything in this module computes in
//! f64; the differentiable counterpart for training lives in [`crate::loss`].

use crate::error::{Error, Result};
use crate::phantom::DynamicImage;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// MSE is clamped from below so identical inputs give a finite loss.
pub const MSE_EPS: f64 = 1e-10;
/// Gaussian window taps for SSIM.
pub const SSIM_WINDOW: usize = 11;
/// Gaussian window std for SSIM.
pub const SSIM_SIGMA: f64 = 1.5;

/// Mixing weights of the composite loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!(
                    "{} must lie in [0, 1], got {}",
                    name, v
                )));
            }
        }
        Ok(())
    }
}

/// SSIM/PSNR configuration. `c1` and `c2` are derived from (k1, k2) and the
/// dynamic range.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SsimParams {
    /// Maximum possible input value (PSNR numerator).
    pub max_value: f64,
    /// Dynamic range of pixel values (SSIM stabilizers).
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
    /// Number of dyadic scales for MS-SSIM.
    pub m_scales: usize,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            max_value: 1.0,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
            m_scales: 3,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_value > 0.0) || !(self.dynamic_range > 0.0) {
            return Err(Error::Config(format!(
                "max_value and dynamic_range must be positive, got {} and {}",
                self.max_value, self.dynamic_range
            )));
        }
        if !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::Config(format!(
                "k1 and k2 must be positive, got {} and {}",
                self.k1, self.k2
            )));
        }
        if self.m_scales == 0 {
            return Err(Error::Config("m_scales must be >= 1".into()));
        }
        Ok(())
    }

    /// Largest scale count an HxW frame supports (downscales must stay at
    /// least one window wide).
    pub fn max_scales_for(h: usize, w: usize) -> usize {
        let mut side = h.min(w);
        let mut m = 0;
        while side >= SSIM_WINDOW {
            m += 1;
            side /= 2;
        }
        m.max(1)
    }
}

fn check_same_dims(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    check_same_dims(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(sum / x.len() as f64)
}

/// Mean squared difference over all elements.
pub fn mse(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    check_same_dims(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a - b).powi(2))
        .sum();
    Ok(sum / x.len() as f64)
}

pub fn rmse(x: &Tensor<f64>, y: &Tensor<f64>) -> Result<f64> {
    Ok(mse(x, y)?.sqrt())
}

/// log10(MAX^2 / max(MSE, eps)), the loss-side PSNR, without the
/// conventional factor of 10.
pub fn psnr_loss(x: &Tensor<f64>, y: &Tensor<f64>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    let e = mse(x, y)?.max(MSE_EPS);
    Ok((params.max_value * params.max_value / e).log10())
}

/// Conventional PSNR in decibels.
pub fn psnr_db(x: &Tensor<f64>, y: &Tensor<f64>, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Config(format!(
            "max_value must be positive, got {}",
            max_value
        )));
    }
    let e = mse(x, y)?.max(MSE_EPS);
    Ok(10.0 * (max_value * max_value / e).log10())
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-mode Gaussian filter of a rank-2 tensor.
fn gauss_filter_valid(x: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let k = gaussian_window();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // horizontal pass: h x ow
    let mut mid = vec![0f64; h * ow];
    let data = x.data();
    for y in 0..h {
        for xo in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * data[y * w + xo + i];
            }
            mid[y * ow + xo] = s;
        }
    }
    // vertical pass: oh x ow
    let mut out = vec![0f64; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            let mut s = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                s += kv * mid[(yo + i) * ow + xo];
            }
            out[yo * ow + xo] = s;
        }
    }
    Tensor::from_vec(&[oh, ow], out).expect("valid-filter dims")
}

/// Per-window luminance and contrast-structure maps.
fn ssim_maps(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    c1: f64,
    c2: f64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (h, w) = (x.dims()[0], x.dims()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "frame {}x{} smaller than the {}-tap SSIM window",
            h, w, SSIM_WINDOW
        )));
    }
    let xx = crate::tensor::broadcast_zip(x, x, |a, b| a * b)?;
    let yy = crate::tensor::broadcast_zip(y, y, |a, b| a * b)?;
    let xy = crate::tensor::broadcast_zip(x, y, |a, b| a * b)?;
    let mu_x = gauss_filter_valid(x);
    let mu_y = gauss_filter_valid(y);
    let m_xx = gauss_filter_valid(&xx);
    let m_yy = gauss_filter_valid(&yy);
    let m_xy = gauss_filter_valid(&xy);
    let n = mu_x.len();
    let mut l = vec![0f64; n];
    let mut cs = vec![0f64; n];
    for i in 0..n {
        let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
        let sxx = m_xx.data()[i] - mx * mx;
        let syy = m_yy.data()[i] - my * my;
        let sxy = m_xy.data()[i] - mx * my;
        l[i] = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        cs[i] = (2.0 * sxy + c2) / (sxx + syy + c2);
    }
    Ok((
        Tensor::from_vec(mu_x.dims(), l)?,
        Tensor::from_vec(mu_x.dims(), cs)?,
    ))
}

/// Single-scale SSIM of one rank-2 frame pair.
pub fn ssim(x: &Tensor<f64>, y: &Tensor<f64>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    check_same_dims(x, y)?;
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "ssim expects a 2D frame, got {:?}",
            x.dims()
        )));
    }
    let (l, cs) = ssim_maps(x, y, params.c1(), params.c2())?;
    let sum: f64 = l.data().iter().zip(cs.data()).map(|(&a, &b)| a * b).sum();
    Ok(sum / l.len() as f64)
}

/// 2x average pool with floor semantics (odd trailing row/col dropped).
pub fn avg_pool2_floor(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Size(format!("cannot pool a {}x{} frame", h, w)));
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for xo in 0..ow {
            let base = 2 * y * w + 2 * xo;
            out[y * ow + xo] =
                0.25 * (x.data()[base] + x.data()[base + 1] + x.data()[base + w] + x.data()[base + w + 1]);
        }
    }
    Tensor::from_vec(&[oh, ow], out)
}

/// Multi-scale SSIM: the luminance term enters at the coarsest scale,
/// multiplied by the mean contrast-structure terms of all scales.
pub fn ms_ssim(x: &Tensor<f64>, y: &Tensor<f64>, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    check_same_dims(x, y)?;
    if x.rank() != 2 {
        return Err(Error::Shape(format!(
            "ms_ssim expects a 2D frame, got {:?}",
            x.dims()
        )));
    }
    let (h, w) = (x.dims()[0], x.dims()[1]);
    let coarsest = h.min(w) >> (params.m_scales - 1);
    if coarsest < SSIM_WINDOW {
        return Err(Error::Size(format!(
            "{}x{} frame cannot support {} scales (coarsest side {} < window {})",
            h, w, params.m_scales, coarsest, SSIM_WINDOW
        )));
    }
    let mut cur_x = x.clone();
    let mut cur_y = y.clone();
    let mut product = 1.0;
    for scale in 0..params.m_scales {
        let (l, cs) = ssim_maps(&cur_x, &cur_y, params.c1(), params.c2())?;
        if scale + 1 == params.m_scales {
            let sum: f64 = l.data().iter().zip(cs.data()).map(|(&a, &b)| a * b).sum();
            product *= sum / l.len() as f64;
        } else {
            let sum: f64 = cs.data().iter().sum();
            product *= sum / cs.len() as f64;
            cur_x = avg_pool2_floor(&cur_x)?;
            cur_y = avg_pool2_floor(&cur_y)?;
        }
    }
    Ok(product)
}

/// MS-SSIM averaged over the leading axes of a rank >= 2 tensor whose last
/// two axes are spatial.
pub fn ms_ssim_batched(x: &Tensor<f64>, y: &Tensor<f64>, params: &SsimParams) -> Result<f64> {
    check_same_dims(x, y)?;
    if x.rank() < 2 {
        return Err(Error::Shape(format!(
            "need at least 2 dims, got {:?}",
            x.dims()
        )));
    }
    let r = x.rank();
    let (h, w) = (x.dims()[r - 2], x.dims()[r - 1]);
    let frames = x.len() / (h * w);
    let mut total = 0.0;
    for f in 0..frames {
        let fx = Tensor::from_vec(&[h, w], x.data()[f * h * w..(f + 1) * h * w].to_vec())?;
        let fy = Tensor::from_vec(&[h, w], y.data()[f * h * w..(f + 1) * h * w].to_vec())?;
        total += ms_ssim(&fx, &fy, params)?;
    }
    Ok(total / frames as f64)
}

/// The training objective:
/// -alpha * psnr_loss + (1-alpha) * [beta * (1 - ms_ssim) + (1-beta) * l1].
///
/// Inputs are (..., H, W); MS-SSIM is averaged over the leading axes.
pub fn composite_loss(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    weights: &LossWeights,
    params: &SsimParams,
) -> Result<f64> {
    weights.validate()?;
    let p = psnr_loss(x, y, params)?;
    let ms = ms_ssim_batched(x, y, params)?;
    let l1 = l1_loss(x, y)?;
    Ok(-weights.alpha * p + (1.0 - weights.alpha) * (weights.beta * (1.0 - ms) + (1.0 - weights.beta) * l1))
}

/// Per-frame metric rows of the evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

/// Sequence-level evaluation summary, serialized by `cinerst eval`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub psnr_db: f64,
    pub one_minus_ssim: f64,
    pub ms_ssim: f64,
    pub per_frame: Vec<FrameMetrics>,
}

fn frame_slices(img: &DynamicImage, t: usize) -> Result<Vec<Tensor<f64>>> {
    let (_, h, w, z_n) = img.dims();
    let frame = img.frame_at(t)?; // (H, W, Z)
    (0..z_n)
        .map(|z| {
            frame
                .sliced(2, z, 1)?
                .reshaped(&[h, w])
                .map(|t2| t2.convert::<f64>())
        })
        .collect()
}

/// Full evaluation of a reconstruction against ground truth: global
/// RMSE/PSNR over all voxels, SSIM family per (t, z) frame and averaged.
pub fn evaluate(
    pred: &DynamicImage,
    truth: &DynamicImage,
    params: &SsimParams,
) -> Result<MetricsReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::Shape(format!(
            "prediction dims {:?} do not match truth {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let (t_n, ..) = pred.dims();
    let px = pred.tensor().convert::<f64>();
    let tx = truth.tensor().convert::<f64>();
    let total_rmse = rmse(&px, &tx)?;
    let total_psnr = psnr_db(&px, &tx, params.max_value)?;

    let mut per_frame = Vec::with_capacity(t_n);
    let (mut ssim_acc, mut ms_acc) = (0.0, 0.0);
    for t in 0..t_n {
        let ps = frame_slices(pred, t)?;
        let ts = frame_slices(truth, t)?;
        let (mut fr_ssim, mut fr_ms, mut fr_mse) = (0.0, 0.0, 0.0);
        for (pz, tz) in ps.iter().zip(&ts) {
            fr_ssim += ssim(pz, tz, params)?;
            fr_ms += ms_ssim(pz, tz, params)?;
            fr_mse += mse(pz, tz)?;
        }
        let z_n = ps.len() as f64;
        fr_ssim /= z_n;
        fr_ms /= z_n;
        fr_mse /= z_n;
        ssim_acc += fr_ssim;
        ms_acc += fr_ms;
        per_frame.push(FrameMetrics {
            frame: t,
            rmse: fr_mse.sqrt(),
            psnr_db: 10.0 * (params.max_value * params.max_value / fr_mse.max(MSE_EPS)).log10(),
            ssim: fr_ssim,
            ms_ssim: fr_ms,
        });
    }
    Ok(MetricsReport {
        rmse: total_rmse,
        psnr_db: total_psnr,
        one_minus_ssim: 1.0 - ssim_acc / t_n as f64,
        ms_ssim: ms_acc / t_n as f64,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_frame(rng: &mut ChaCha20Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[h, w], (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    /// Direct per-window SSIM with an explicit 2D kernel, no separable
    /// shortcut; the reference for the filtered implementation.
    fn oracle_ssim_maps(
        x: &Tensor<f64>,
        y: &Tensor<f64>,
        c1: f64,
        c2: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (x.dims()[0], x.dims()[1]);
        let k1d = gaussian_window();
        let mut k2d = vec![0f64; SSIM_WINDOW * SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                k2d[i * SSIM_WINDOW + j] = k1d[i] * k1d[j];
            }
        }
        let mut l_map = Vec::new();
        let mut cs_map = Vec::new();
        for wy in 0..h - SSIM_WINDOW + 1 {
            for wx in 0..w - SSIM_WINDOW + 1 {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let kw = k2d[i * SSIM_WINDOW + j];
                        let a = x.data()[(wy + i) * w + wx + j];
                        let b = y.data()[(wy + i) * w + wx + j];
                        mx += kw * a;
                        my += kw * b;
                        sxx += kw * a * a;
                        syy += kw * b * b;
                        sxy += kw * a * b;
                    }
                }
                sxx -= mx * mx;
                syy -= my * my;
                sxy -= mx * my;
                l_map.push((2.0 * mx * my + c1) / (mx * mx + my * my + c1));
                cs_map.push((2.0 * sxy + c2) / (sxx + syy + c2));
            }
        }
        (l_map, cs_map)
    }

    fn oracle_ssim(x: &Tensor<f64>, y: &Tensor<f64>, p: &SsimParams) -> f64 {
        let (l, cs) = oracle_ssim_maps(x, y, p.c1(), p.c2());
        l.iter().zip(&cs).map(|(&a, &b)| a * b).sum::<f64>() / l.len() as f64
    }

    fn oracle_pool(x: &Tensor<f64>) -> Tensor<f64> {
        let (h, w) = (x.dims()[0], x.dims()[1]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0f64; oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x.data()[(2 * y + dy) * w + 2 * xo + dx];
                    }
                }
                out[y * ow + xo] = s / 4.0;
            }
        }
        Tensor::from_vec(&[oh, ow], out).unwrap()
    }

    fn oracle_ms_ssim(x: &Tensor<f64>, y: &Tensor<f64>, p: &SsimParams) -> f64 {
        let mut cx = x.clone();
        let mut cy = y.clone();
        let mut prod = 1.0;
        for scale in 0..p.m_scales {
            let (l, cs) = oracle_ssim_maps(&cx, &cy, p.c1(), p.c2());
            if scale + 1 == p.m_scales {
                prod *= l.iter().zip(&cs).map(|(&a, &b)| a * b).sum::<f64>() / l.len() as f64;
            } else {
                prod *= cs.iter().sum::<f64>() / cs.len() as f64;
                cx = oracle_pool(&cx);
                cy = oracle_pool(&cy);
            }
        }
        prod
    }

    #[test]
    fn l1_analytic_cases() {
        let x = Tensor::from_vec(&[2, 2], vec![0.1, 0.4, 0.2, 0.9]).unwrap();
        assert_eq!(l1_loss(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.25);
        assert!((l1_loss(&x, &y).unwrap() - 0.25).abs() < 1e-12);
        let a = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!((l1_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_analytic_cases() {
        let p = SsimParams::default();
        let x = Tensor::<f64>::zeros(&[4, 4]);
        let y = x.map(|_| 0.1);
        assert!((psnr_loss(&x, &y, &p).unwrap() - 2.0).abs() < 1e-10);
        assert!((psnr_loss(&x, &x, &p).unwrap() - 10.0).abs() < 1e-7);
        let unit = x.map(|_| 1.0);
        assert!(psnr_loss(&x, &unit, &p).unwrap().abs() < 1e-12);

        assert!((psnr_db(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let y2 = x.map(|_| 0.01);
        assert!((psnr_db(&x, &y2, 1.0).unwrap() - 40.0).abs() < 1e-9);
        assert!(
            (psnr_db(&x, &y, p.max_value).unwrap() - 10.0 * psnr_loss(&x, &y, &p).unwrap()).abs()
                < 1e-9
        );
    }

    #[test]
    fn rmse_analytic_cases() {
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        let y = x.map(|v| v + 0.1);
        assert!((rmse(&x, &y).unwrap() - 0.1).abs() < 1e-12);
        let z = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert!((rmse(&x, &z).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let y = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(l1_loss(&x, &y), Err(Error::Shape(_))));
        assert!(matches!(rmse(&x, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let p = SsimParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = rand_frame(&mut rng, 16, 16);
        assert_eq!(ssim(&x, &x, &p).unwrap(), 1.0);

        let a = Tensor::<f64>::full(&[12, 12], 0.3);
        let b = Tensor::<f64>::full(&[12, 12], 0.7);
        let expect = (2.0 * 0.3 * 0.7 + p.c1()) / (0.3f64.powi(2) + 0.7f64.powi(2) + p.c1());
        assert!((ssim(&a, &b, &p).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_bruteforce_oracle() {
        let p = SsimParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = rand_frame(&mut rng, 16, 16);
            let y = rand_frame(&mut rng, 16, 16);
            let got = ssim(&x, &y, &p).unwrap();
            let want = oracle_ssim(&x, &y, &p);
            assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
            assert!(got <= 1.0 + 1e-9);
            // symmetry
            assert!((ssim(&y, &x, &p).unwrap() - got).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_window_size_enforced() {
        let p = SsimParams::default();
        let x = Tensor::<f64>::zeros(&[8, 8]);
        assert!(matches!(ssim(&x, &x, &p), Err(Error::Size(_))));
    }

    #[test]
    fn ms_ssim_identity_and_degeneracy() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = rand_frame(&mut rng, 16, 16);
        let y = rand_frame(&mut rng, 16, 16);
        let p1 = SsimParams {
            m_scales: 1,
            ..SsimParams::default()
        };
        assert_eq!(ms_ssim(&x, &x, &p1).unwrap(), 1.0);
        let single = ssim(&x, &y, &p1).unwrap();
        assert!((ms_ssim(&x, &y, &p1).unwrap() - single).abs() < 1e-7);
    }

    #[test]
    fn ms_ssim_matches_two_scale_oracle() {
        let p = SsimParams {
            m_scales: 2,
            ..SsimParams::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = rand_frame(&mut rng, 32, 32);
            let y = rand_frame(&mut rng, 32, 32);
            let got = ms_ssim(&x, &y, &p).unwrap();
            let want = oracle_ms_ssim(&x, &y, &p);
            assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
            assert!(got <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn ms_ssim_resolution_guard() {
        // three scales need the coarsest side to still fit the window
        let p = SsimParams::default();
        let x = Tensor::<f64>::zeros(&[32, 32]);
        assert!(matches!(ms_ssim(&x, &x, &p), Err(Error::Size(_))));
        assert_eq!(SsimParams::max_scales_for(32, 32), 2);
        assert_eq!(SsimParams::max_scales_for(144, 144), 4);
    }

    #[test]
    fn composite_identity_and_degeneracies() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let x = rand_frame(&mut rng, 16, 16);
        let y = rand_frame(&mut rng, 16, 16);
        let p = SsimParams {
            m_scales: 1,
            ..SsimParams::default()
        };
        let w = LossWeights::default();
        let ident = composite_loss(&x, &x, &w, &p).unwrap();
        assert!((ident - (-5.0)).abs() < 1e-7, "identity loss {}", ident);

        let w_psnr = LossWeights {
            alpha: 1.0,
            beta: 0.5,
        };
        let got = composite_loss(&x, &y, &w_psnr, &p).unwrap();
        assert!((got - (-psnr_loss(&x, &y, &p).unwrap())).abs() < 1e-7);

        let w_l1 = LossWeights {
            alpha: 0.0,
            beta: 0.0,
        };
        let got = composite_loss(&x, &y, &w_l1, &p).unwrap();
        assert!((got - l1_loss(&x, &y).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn monotone_in_offset() {
        let x = Tensor::<f64>::full(&[8, 8], 0.4);
        let mut last_rmse = -1.0;
        let mut last_l1 = -1.0;
        for k in 1..5 {
            let y = x.map(|v| v + 0.05 * k as f64);
            let r = rmse(&x, &y).unwrap();
            let l = l1_loss(&x, &y).unwrap();
            assert!(r > last_rmse && l > last_l1);
            last_rmse = r;
            last_l1 = l;
        }
    }

    #[test]
    fn weights_validated() {
        let w = LossWeights {
            alpha: 1.5,
            beta: 0.5,
        };
        assert!(matches!(w.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn evaluate_identity_report() {
        let img = crate::phantom::generate_cine(&crate::phantom::PhantomSpec {
            frames: 2,
            height: 16,
            width: 16,
            slices: 1,
            n_ellipses: 2,
            motion_amplitude: 0.05,
            period_frames: 2.0,
            noise_sigma: 0.0,
            seed: 1,
        })
        .unwrap();
        let p = SsimParams {
            m_scales: 1,
            ..SsimParams::default()
        };
        let rep = evaluate(&img, &img, &p).unwrap();
        assert_eq!(rep.rmse, 0.0);
        assert_eq!(rep.one_minus_ssim, 0.0);
        assert_eq!(rep.per_frame.len(), 2);
        let js = serde_json::to_string(&rep).unwrap();
        assert!(js.contains("\"one_minus_ssim\""));
    }
}
