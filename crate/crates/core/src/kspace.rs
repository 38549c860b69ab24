//! Acquisition forward model: per-frame centered unitary 2D DFT, Cartesian
//! variable-density undersampling, and the zero-filled baseline.
//!
//! The sampling mask is a surrogate for variable-density incoherent
//! spatiotemporal (VISTA) sampling: every frame keeps a fixed central
//! low-frequency band and draws the remaining phase-encode rows without
//! replacement under a Gaussian density centered on DC, re-randomized per
//! frame so the pattern is temporally incoherent.

use crate::error::{Error, Result};
use crate::phantom::DynamicImage;
use crate::tensor::Tensor;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rustfft::FftPlanner;
use std::path::Path;

/// Complex per-frame spectra with dims (T, H, W, Z), Z fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    dims: (usize, usize, usize, usize),
    data: Vec<Complex<f64>>,
}

impl KSpaceData {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<Complex<f64>>) -> Result<Self> {
        let (t, h, w, z) = dims;
        if t * h * w * z != data.len() {
            return Err(Error::Shape(format!(
                "k-space dims {:?} require {} values, got {}",
                dims,
                t * h * w * z,
                data.len()
            )));
        }
        Ok(KSpaceData { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (t, h, w, z) = self.dims;
        crate::dmt4::write_complex(path, &[t, h, w, z], &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = crate::dmt4::read_complex(&path)?;
        if dims.len() != 4 {
            return Err(Error::Dmt4(format!(
                "{}: k-space requires 4 dims, got {:?}",
                path.as_ref().display(),
                dims
            )));
        }
        KSpaceData::new((dims[0], dims[1], dims[2], dims[3]), data)
    }
}

/// Complex image-domain tensor returned by the inverse transform.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    dims: (usize, usize, usize, usize),
    data: Vec<Complex<f64>>,
}

impl ComplexImage {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[Complex<f64>] {
        &self.data
    }

    /// Elementwise magnitudes as an f64 vector (same layout).
    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Cyclic 2D roll over the (H, W) axes of a (T, H, W, Z) grid.
fn roll2(data: &[Complex<f64>], dims: (usize, usize, usize, usize), dy: usize, dx: usize) -> Vec<Complex<f64>> {
    let (t_n, h, w, z_n) = dims;
    let mut out = vec![Complex::default(); data.len()];
    for t in 0..t_n {
        for y in 0..h {
            let oy = (y + dy) % h;
            for x in 0..w {
                let ox = (x + dx) % w;
                let src = ((t * h + y) * w + x) * z_n;
                let dst = ((t * h + oy) * w + ox) * z_n;
                out[dst..dst + z_n].copy_from_slice(&data[src..src + z_n]);
            }
        }
    }
    out
}

/// Unnormalized 2D FFT (or inverse FFT) applied to every (t, z) frame.
fn fft2_frames(data: &mut [Complex<f64>], dims: (usize, usize, usize, usize), forward: bool) {
    let (t_n, h, w, z_n) = dims;
    let mut planner = FftPlanner::new();
    let fft_w = if forward {
        planner.plan_fft_forward(w)
    } else {
        planner.plan_fft_inverse(w)
    };
    let fft_h = if forward {
        planner.plan_fft_forward(h)
    } else {
        planner.plan_fft_inverse(h)
    };
    let mut row = vec![Complex::default(); w];
    let mut col = vec![Complex::default(); h];
    for t in 0..t_n {
        for z in 0..z_n {
            for y in 0..h {
                for x in 0..w {
                    row[x] = data[((t * h + y) * w + x) * z_n + z];
                }
                fft_w.process(&mut row);
                for x in 0..w {
                    data[((t * h + y) * w + x) * z_n + z] = row[x];
                }
            }
            for x in 0..w {
                for y in 0..h {
                    col[y] = data[((t * h + y) * w + x) * z_n + z];
                }
                fft_h.process(&mut col);
                for y in 0..h {
                    data[((t * h + y) * w + x) * z_n + z] = col[y];
                }
            }
        }
    }
}

/// Centered unitary 2D DFT of every frame; DC lands at (H/2, W/2).
pub fn dft2_frames(img: &DynamicImage) -> KSpaceData {
    let (t_n, h, w, z_n) = img.dims();
    let mut data: Vec<Complex<f64>> = img
        .tensor()
        .data()
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    fft2_frames(&mut data, (t_n, h, w, z_n), true);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for c in data.iter_mut() {
        *c *= scale;
    }
    let shifted = roll2(&data, (t_n, h, w, z_n), h / 2, w / 2);
    KSpaceData {
        dims: (t_n, h, w, z_n),
        data: shifted,
    }
}

/// Inverse of [`dft2_frames`]; take magnitudes to get back to image space.
pub fn idft2_frames(k: &KSpaceData) -> ComplexImage {
    let (_, h, w, _) = k.dims;
    // undo the centering roll, then invert the transform
    let mut data = roll2(&k.data, k.dims, h - h / 2, w - w / 2);
    fft2_frames(&mut data, k.dims, false);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for c in data.iter_mut() {
        *c *= scale;
    }
    ComplexImage { dims: k.dims, data }
}

/// Binary Cartesian sampling pattern over (T, H, W), constant along W.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    dims: (usize, usize, usize),
    data: Vec<u8>,
    pub target_acceleration: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_sampled(&self, t: usize, row: usize) -> bool {
        let (_, h, w) = self.dims;
        debug_assert!(row < h);
        self.data[(t * h + row) * w] == 1
    }

    /// Sampled row indices for frame `t`.
    pub fn rows(&self, t: usize) -> Vec<usize> {
        (0..self.dims.1).filter(|&r| self.is_sampled(t, r)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (t, h, w) = self.dims;
        crate::dmt4::write_u8(path, &[t, h, w], &self.data)
    }

    /// Load a mask file. Acceleration is re-estimated from the row counts
    /// since the container stores only the pattern.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (dims, data) = crate::dmt4::read_u8(&path)?;
        if dims.len() != 3 {
            return Err(Error::Dmt4(format!(
                "{}: mask requires dims (T, H, W), got {:?}",
                path.as_ref().display(),
                dims
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Dmt4(format!(
                "{}: mask values must be 0 or 1",
                path.as_ref().display()
            )));
        }
        let (t, h, w) = (dims[0], dims[1], dims[2]);
        let mask = SamplingMask {
            dims: (t, h, w),
            data,
            target_acceleration: 1.0,
            seed: 0,
        };
        let total_rows: usize = (0..t).map(|f| mask.rows(f).len()).sum();
        let r_est = if total_rows == 0 {
            f64::INFINITY
        } else {
            (t * h) as f64 / total_rows as f64
        };
        Ok(SamplingMask {
            target_acceleration: r_est,
            ..mask
        })
    }
}

fn mix_seed(seed: u64, t: u64) -> u64 {
    let mut z = seed ^ t.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Variable-density incoherent Cartesian mask at acceleration `r`.
///
/// Each frame samples exactly ceil(H/R) rows: a fixed central band of
/// max(1, ceil(H/(8R))) * 2 rows, plus rows drawn without replacement with
/// probability proportional to exp(-(row - H/2)^2 / (2 (H/4)^2)). Frames use
/// seeds derived from (seed, t), so patterns differ across time.
pub fn make_vista_mask(t_n: usize, h: usize, w: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    if t_n == 0 || w == 0 {
        return Err(Error::InvalidSpec(format!(
            "mask dims must be >= 1, got T={} W={}",
            t_n, w
        )));
    }
    if h < 8 {
        return Err(Error::InvalidSpec(format!("mask height must be >= 8, got {}", h)));
    }
    if !r.is_finite() || r < 1.0 {
        return Err(Error::InfeasibleAcceleration(format!(
            "acceleration must be >= 1, got {}",
            r
        )));
    }
    if r > h as f64 {
        return Err(Error::InfeasibleAcceleration(format!(
            "acceleration {} exceeds the {} phase-encode rows",
            r, h
        )));
    }

    let n_rows = (h as f64 / r).ceil() as usize;
    let band = ((h as f64 / (8.0 * r)).ceil() as usize * 2).max(1).min(n_rows);
    let band_start = h / 2 - band / 2;
    let sigma = h as f64 / 4.0;
    let center = h as f64 / 2.0;

    let mut data = vec![0u8; t_n * h * w];
    for t in 0..t_n {
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(seed, t as u64));
        let mut sampled = vec![false; h];
        for row in band_start..band_start + band {
            sampled[row] = true;
        }
        let mut pool: Vec<usize> = (0..h).filter(|&row| !sampled[row]).collect();
        let mut weights: Vec<f64> = pool
            .iter()
            .map(|&row| (-((row as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        for _ in band..n_rows {
            let total: f64 = weights.iter().sum();
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = pool.len() - 1;
            for (i, &wt) in weights.iter().enumerate() {
                acc += wt;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            sampled[pool[pick]] = true;
            pool.swap_remove(pick);
            weights.swap_remove(pick);
        }
        for (row, &on) in sampled.iter().enumerate() {
            if on {
                let base = (t * h + row) * w;
                data[base..base + w].fill(1);
            }
        }
    }
    Ok(SamplingMask {
        dims: (t_n, h, w),
        data,
        target_acceleration: r,
        seed,
    })
}

/// Elementwise product of k-space with the mask (broadcast along Z).
pub fn undersample(k: &KSpaceData, mask: &SamplingMask) -> Result<KSpaceData> {
    let (t_n, h, w, z_n) = k.dims;
    if mask.dims != (t_n, h, w) {
        return Err(Error::Shape(format!(
            "mask dims {:?} do not match k-space dims {:?}",
            mask.dims, k.dims
        )));
    }
    let mut data = k.data.clone();
    for (i, c) in data.iter_mut().enumerate() {
        if mask.data[i / z_n] == 0 {
            *c = Complex::new(0.0, 0.0);
        }
    }
    Ok(KSpaceData { dims: k.dims, data })
}

/// Nearest-rank 99th percentile of nonnegative values.
pub fn percentile99(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() as f64) * 0.99).ceil() as usize;
    sorted[idx.clamp(1, sorted.len()) - 1]
}

/// Scale so the 99th percentile maps to 1, then clamp to [0, 1].
pub fn normalize_p99(values: &[f64]) -> Vec<f32> {
    let p99 = percentile99(values);
    let scale = if p99 > 0.0 { 1.0 / p99 } else { 1.0 };
    values
        .iter()
        .map(|&v| (v * scale).clamp(0.0, 1.0) as f32)
        .collect()
}

/// Magnitude of the inverse transform, 99th-percentile normalized.
pub fn zero_filled_recon(k_under: &KSpaceData) -> Result<DynamicImage> {
    let (t_n, h, w, z_n) = k_under.dims;
    let mags = idft2_frames(k_under).magnitudes();
    let values = normalize_p99(&mags);
    DynamicImage::from_tensor(Tensor::from_vec(&[t_n, h, w, z_n], values)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cine, PhantomSpec};

    fn test_image() -> DynamicImage {
        generate_cine(&PhantomSpec {
            frames: 3,
            height: 16,
            width: 12,
            slices: 2,
            n_ellipses: 2,
            motion_amplitude: 0.05,
            period_frames: 3.0,
            noise_sigma: 0.0,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut t = Tensor::<f32>::zeros(&[1, 8, 8, 1]);
        t.data_mut()[0] = 1.0;
        let k = dft2_frames(&DynamicImage::from_tensor(t).unwrap());
        let expect = 1.0 / 8.0;
        for c in k.data() {
            assert!((c.norm() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_coefficient_gives_constant_image() {
        let (h, w) = (10, 8);
        let mut data = vec![Complex::new(0.0, 0.0); h * w];
        let c = Complex::new(0.7, -0.2);
        data[(h / 2) * w + w / 2] = c;
        let k = KSpaceData::new((1, h, w, 1), data).unwrap();
        let img = idft2_frames(&k);
        let expect = c / ((h * w) as f64).sqrt();
        for v in img.data() {
            assert!((v - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_and_energy() {
        let img = test_image();
        let k = dft2_frames(&img);
        let back = idft2_frames(&k);
        let mut max_err = 0f64;
        for (orig, rec) in img.tensor().data().iter().zip(back.data()) {
            max_err = max_err.max((rec.re - *orig as f64).abs().max(rec.im.abs()));
        }
        assert!(max_err < 1e-6, "roundtrip error {}", max_err);

        let img_energy: f64 = img.tensor().data().iter().map(|&v| (v as f64).powi(2)).sum();
        let k_energy: f64 = k.data().iter().map(|c| c.norm_sqr()).sum();
        assert!(
            (img_energy - k_energy).abs() / img_energy < 1e-5,
            "energy {} vs {}",
            img_energy,
            k_energy
        );
    }

    #[test]
    fn zero_kspace_gives_zero_image() {
        let k = KSpaceData::new((1, 8, 8, 1), vec![Complex::new(0.0, 0.0); 64]).unwrap();
        assert!(idft2_frames(&k).data().iter().all(|c| c.norm() == 0.0));
        let zf = zero_filled_recon(&k).unwrap();
        assert!(zf.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_r1_is_all_ones_and_identity() {
        let mask = make_vista_mask(2, 16, 12, 1.0, 3).unwrap();
        assert!(mask.data().iter().all(|&v| v == 1));
        let img = test_image();
        let k = dft2_frames(&img);
        let ku = undersample(&k, &make_vista_mask(3, 16, 12, 1.0, 3).unwrap()).unwrap();
        assert_eq!(ku.data(), k.data());
    }

    #[test]
    fn mask_density_144_at_r9() {
        let mask = make_vista_mask(8, 144, 1, 9.0, 42).unwrap();
        for t in 0..8 {
            assert_eq!(mask.rows(t).len(), 16, "frame {}", t);
        }
        // central band rows are always on
        for t in 0..8 {
            for row in 70..74 {
                assert!(mask.is_sampled(t, row));
            }
        }
    }

    #[test]
    fn mask_incoherent_across_frames() {
        let mask = make_vista_mask(8, 144, 1, 9.0, 5).unwrap();
        let single = mask.rows(0).len();
        let mut union = std::collections::BTreeSet::new();
        for t in 0..8 {
            union.extend(mask.rows(t));
        }
        assert!(union.len() > single, "union {} vs single {}", union.len(), single);
    }

    #[test]
    fn mask_deterministic_and_w_constant() {
        let a = make_vista_mask(4, 32, 24, 4.0, 9).unwrap();
        let b = make_vista_mask(4, 32, 24, 4.0, 9).unwrap();
        assert_eq!(a, b);
        let c = make_vista_mask(4, 32, 24, 4.0, 10).unwrap();
        assert_ne!(a, c);
        for t in 0..4 {
            for row in 0..32 {
                let base = (t * 32 + row) * 24;
                let first = a.data()[base];
                assert!(a.data()[base..base + 24].iter().all(|&v| v == first));
            }
        }
    }

    #[test]
    fn infeasible_acceleration_rejected() {
        assert!(matches!(
            make_vista_mask(2, 16, 16, 17.0, 0),
            Err(Error::InfeasibleAcceleration(_))
        ));
        assert!(matches!(
            make_vista_mask(2, 16, 16, 0.5, 0),
            Err(Error::InfeasibleAcceleration(_))
        ));
    }

    #[test]
    fn undersample_selects_rows() {
        let img = test_image();
        let k = dft2_frames(&img);
        let (t_n, h, w, z_n) = k.dims();
        let mut mask = make_vista_mask(t_n, h, w, 1.0, 0).unwrap();
        // keep only row 5
        mask.data = vec![0; t_n * h * w];
        for t in 0..t_n {
            let base = (t * h + 5) * w;
            mask.data[base..base + w].fill(1);
        }
        let ku = undersample(&k, &mask).unwrap();
        for (i, c) in ku.data().iter().enumerate() {
            let row = i / z_n / w % h;
            if row == 5 {
                assert_eq!(*c, k.data()[i]);
            } else {
                assert_eq!(c.norm(), 0.0);
            }
        }
    }

    #[test]
    fn undersample_dim_mismatch() {
        let img = test_image();
        let k = dft2_frames(&img);
        let mask = make_vista_mask(2, 16, 12, 2.0, 0).unwrap();
        assert!(matches!(undersample(&k, &mask), Err(Error::Shape(_))));
    }

    #[test]
    fn fully_sampled_zero_fill_recovers_input() {
        let img = test_image();
        let k = dft2_frames(&img);
        let zf = zero_filled_recon(&k).unwrap();
        let truth: Vec<f64> = img.tensor().data().iter().map(|&v| v as f64).collect();
        let expect = normalize_p99(&truth);
        for (a, b) in zf.tensor().data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn undersampling_degrades_reconstruction() {
        let img = test_image();
        let k = dft2_frames(&img);
        let mask = make_vista_mask(3, 16, 12, 4.0, 1).unwrap();
        let ku = undersample(&k, &mask).unwrap();
        let zf_full = zero_filled_recon(&k).unwrap();
        let zf_under = zero_filled_recon(&ku).unwrap();
        let rmse = |a: &DynamicImage, b: &DynamicImage| {
            let s: f64 = a
                .tensor()
                .data()
                .iter()
                .zip(b.tensor().data())
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum();
            (s / a.tensor().len() as f64).sqrt()
        };
        let truth_norm = DynamicImage::from_tensor(
            Tensor::from_vec(
                &[3, 16, 12, 2],
                normalize_p99(&img.tensor().data().iter().map(|&v| v as f64).collect::<Vec<_>>()),
            )
            .unwrap(),
        )
        .unwrap();
        assert!(rmse(&zf_under, &truth_norm) > rmse(&zf_full, &truth_norm));
    }

    #[test]
    fn mask_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.dmt4");
        let mask = make_vista_mask(4, 32, 8, 4.0, 77).unwrap();
        mask.save(&path).unwrap();
        let back = SamplingMask::load(&path).unwrap();
        assert_eq!(back.data(), mask.data());
        assert_eq!(back.dims(), mask.dims());
        assert!((back.target_acceleration - 4.0).abs() < 0.15);
    }

    #[test]
    fn kspace_file_roundtrip_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.dmt4");
        let k = dft2_frames(&test_image());
        k.save(&path).unwrap();
        let back = KSpaceData::load(&path).unwrap();
        assert_eq!(back.dims(), k.dims());
        // storage is single precision
        for (a, b) in back.data().iter().zip(k.data()) {
            assert!((a - b).norm() < 1e-6);
        }
    }
}
