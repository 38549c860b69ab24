//! Paired data augmentation. A single sampled transform is applied to the
//! input and the target so they stay spatially aligned; Gaussian blur is
//! the one exception and touches only the input, only in the SADXNet
//! stage (the target must stay clean).

use super::Stage;
use crate::error::{Error, Result};
use crate::phantom::DynamicImage;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const MAX_ANGLE_DEG: f64 = 10.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
pub const MAX_BLUR_SIGMA: f64 = 1.0;

/// One sampled transform. Quarter turns and flips are exact data
/// movement; the residual small-angle rotation and the rescale share one
/// bilinear resampling pass and are skipped entirely when degenerate, so
/// identity parameters reproduce the input bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    /// Counterclockwise quarter turns, 0..4.
    pub rot90: u8,
    /// Residual rotation, |angle| <= 10 degrees.
    pub angle_deg: f64,
    /// Uniform rescale factor in [0.8, 1.2].
    pub scale: f64,
    /// Output (height, width) after cropping.
    pub crop: (usize, usize),
    /// Fractional crop position in [0, 1] along (y, x).
    pub crop_frac: (f64, f64),
    pub flip_h: bool,
    pub flip_v: bool,
    /// Input-only blur; 0 disables.
    pub blur_sigma: f64,
}

impl AugmentParams {
    pub fn identity(crop: (usize, usize)) -> Self {
        AugmentParams {
            rot90: 0,
            angle_deg: 0.0,
            scale: 1.0,
            crop,
            crop_frac: (0.0, 0.0),
            flip_h: false,
            flip_v: false,
            blur_sigma: 0.0,
        }
    }

    /// Draw a transform for the given stage: flips only for RST, blur
    /// only for SADXNet.
    pub fn sample(rng: &mut ChaCha20Rng, stage: Stage, crop: (usize, usize)) -> Self {
        AugmentParams {
            rot90: rng.gen_range(0..4u8),
            angle_deg: rng.gen_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG),
            scale: rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1),
            crop,
            crop_frac: (rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)),
            flip_h: stage == Stage::Rst && rng.gen::<bool>(),
            flip_v: stage == Stage::Rst && rng.gen::<bool>(),
            blur_sigma: if stage == Stage::Sadxnet {
                rng.gen_range(0.0..=MAX_BLUR_SIGMA)
            } else {
                0.0
            },
        }
    }
}

fn seq_dims(x: &Tensor<f32>) -> (usize, usize, usize, usize) {
    let d = x.dims();
    (d[0], d[1], d[2], d[3])
}

/// One counterclockwise quarter turn of every frame.
fn rot90_once(x: &Tensor<f32>) -> Tensor<f32> {
    let (t, h, w, z) = seq_dims(x);
    let mut out = Tensor::zeros(&[t, w, h, z]);
    let src = x.data();
    let dst = out.data_mut();
    for ti in 0..t {
        for y in 0..w {
            for xx in 0..h {
                for zi in 0..z {
                    dst[((ti * w + y) * h + xx) * z + zi] =
                        src[((ti * h + xx) * w + (w - 1 - y)) * z + zi];
                }
            }
        }
    }
    out
}

/// Rotate by a small angle and rescale in a single bilinear pass with
/// border replication.
fn affine_resample(x: &Tensor<f32>, angle_deg: f64, scale: f64) -> Result<Tensor<f32>> {
    let (t, h, w, z) = seq_dims(x);
    let rh = ((h as f64 * scale).round() as usize).max(1);
    let rw = ((w as f64 * scale).round() as usize).max(1);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy_in = (h as f64 - 1.0) / 2.0;
    let cx_in = (w as f64 - 1.0) / 2.0;
    let cy_out = (rh as f64 - 1.0) / 2.0;
    let cx_out = (rw as f64 - 1.0) / 2.0;
    let mut out = Tensor::zeros(&[t, rh, rw, z]);
    let src = x.data();
    let dst = out.data_mut();
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    for ti in 0..t {
        for y in 0..rh {
            for xx in 0..rw {
                let dy = y as f64 - cy_out;
                let dx = xx as f64 - cx_out;
                let sy = (cos * dy + sin * dx) / scale + cy_in;
                let sx = (-sin * dy + cos * dx) / scale + cx_in;
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = (sy - y0) as f32;
                let fx = (sx - x0) as f32;
                let (y0i, y1i) = (clamp(y0, h), clamp(y0 + 1.0, h));
                let (x0i, x1i) = (clamp(x0, w), clamp(x0 + 1.0, w));
                for zi in 0..z {
                    let at = |yy: usize, xc: usize| src[((ti * h + yy) * w + xc) * z + zi];
                    let top = at(y0i, x0i) * (1.0 - fx) + at(y0i, x1i) * fx;
                    let bot = at(y1i, x0i) * (1.0 - fx) + at(y1i, x1i) * fx;
                    dst[((ti * rh + y) * rw + xx) * z + zi] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Separable Gaussian blur with border replication.
fn blur(x: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let (t, h, w, z) = seq_dims(x);
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / norm).collect();

    let pass = |src: &Tensor<f32>, vertical: bool| {
        let mut out = Tensor::zeros(&[t, h, w, z]);
        let s = src.data();
        let d = out.data_mut();
        for ti in 0..t {
            for y in 0..h as i64 {
                for xx in 0..w as i64 {
                    for zi in 0..z {
                        let mut acc = 0.0f32;
                        for (k, &wt) in weights.iter().enumerate() {
                            let off = k as i64 - radius;
                            let (yy, xc) = if vertical { (y + off, xx) } else { (y, xx + off) };
                            let yy = yy.clamp(0, h as i64 - 1) as usize;
                            let xc = xc.clamp(0, w as i64 - 1) as usize;
                            acc += wt * s[((ti * h + yy) * w + xc) * z + zi];
                        }
                        d[((ti * h + y as usize) * w + xx as usize) * z + zi] = acc;
                    }
                }
            }
        }
        out
    };
    pass(&pass(x, false), true)
}

fn flip(x: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let (t, h, w, z) = seq_dims(x);
    let mut out = Tensor::zeros(&[t, h, w, z]);
    let src = x.data();
    let dst = out.data_mut();
    for ti in 0..t {
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = if horizontal { (y, w - 1 - xx) } else { (h - 1 - y, xx) };
                let s0 = ((ti * h + sy) * w + sx) * z;
                let d0 = ((ti * h + y) * w + xx) * z;
                dst[d0..d0 + z].copy_from_slice(&src[s0..s0 + z]);
            }
        }
    }
    out
}

fn crop(x: &Tensor<f32>, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<Tensor<f32>> {
    let (t, h, w, z) = seq_dims(x);
    if oy + ch > h || ox + cw > w {
        return Err(Error::Config(format!(
            "crop {}x{} at ({}, {}) exceeds image {}x{}",
            ch, cw, oy, ox, h, w
        )));
    }
    let mut out = Tensor::zeros(&[t, ch, cw, z]);
    let src = x.data();
    let dst = out.data_mut();
    for ti in 0..t {
        for y in 0..ch {
            let s0 = ((ti * h + oy + y) * w + ox) * z;
            let d0 = ((ti * ch + y) * cw) * z;
            dst[d0..d0 + cw * z].copy_from_slice(&src[s0..s0 + cw * z]);
        }
    }
    Ok(out)
}

fn geometric(x: &Tensor<f32>, p: &AugmentParams) -> Result<Tensor<f32>> {
    let mut t = x.clone();
    for _ in 0..p.rot90 % 4 {
        t = rot90_once(&t);
    }
    if p.angle_deg != 0.0 || p.scale != 1.0 {
        t = affine_resample(&t, p.angle_deg, p.scale)?;
    }
    let (_, h, w, _) = seq_dims(&t);
    let (ch, cw) = p.crop;
    if ch > h || cw > w {
        return Err(Error::Config(format!(
            "crop {}x{} larger than transformed image {}x{}",
            ch, cw, h, w
        )));
    }
    let oy = (p.crop_frac.0.clamp(0.0, 1.0) * (h - ch) as f64).round() as usize;
    let ox = (p.crop_frac.1.clamp(0.0, 1.0) * (w - cw) as f64).round() as usize;
    t = crop(&t, oy, ox, ch, cw)?;
    if p.flip_h {
        t = flip(&t, true);
    }
    if p.flip_v {
        t = flip(&t, false);
    }
    Ok(t)
}

/// Apply a fixed transform to an aligned pair. Blur hits the input only
/// and only in the SADXNet stage; the shared geometric transform follows.
pub fn apply_augment(
    input: &DynamicImage,
    target: &DynamicImage,
    stage: Stage,
    params: &AugmentParams,
) -> Result<(DynamicImage, DynamicImage)> {
    if input.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "augment pair dims differ: {:?} vs {:?}",
            input.dims(),
            target.dims()
        )));
    }
    let mut a = input.tensor().clone();
    if stage == Stage::Sadxnet && params.blur_sigma > 0.0 {
        a = blur(&a, params.blur_sigma);
    }
    let a = geometric(&a, params)?;
    let b = geometric(target.tensor(), params)?;
    Ok((DynamicImage::from_tensor(a)?, DynamicImage::from_tensor(b)?))
}

/// Sample a transform from the seed and apply it; deterministic.
pub fn augment_pair(
    input: &DynamicImage,
    target: &DynamicImage,
    stage: Stage,
    crop: (usize, usize),
    seed: u64,
) -> Result<(DynamicImage, DynamicImage)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params = AugmentParams::sample(&mut rng, stage, crop);
    apply_augment(input, target, stage, &params)
}
