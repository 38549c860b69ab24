//! Synthetic cine phantoms: soft-edged ellipses on a dark background with
//! periodic motion, used as fully sampled ground truth.
//!
//! One "chamber" ellipse breathes (its radii oscillate, a systole/diastole
//! analogue); the remaining ellipses translate along fixed random directions.
//! Everything is a pure function of [`PhantomSpec`], so the same spec always
//! produces a bit-identical sequence.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Background intensity under all ellipses.
const BACKGROUND: f64 = 0.1;
/// Soft-edge half width in units of the normalized ellipse radius. An
/// ellipse's support ends at 1 + EDGE times its radius.
const EDGE: f64 = 0.3;
/// Horizontal center shift per slice, in pixels, for Z > 1.
const SLICE_SHIFT: f64 = 0.4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub n_ellipses: usize,
    /// Peak motion excursion as a fraction of the image height, in [0, 0.25].
    pub motion_amplitude: f64,
    /// Cycle length in frames; integer periods dividing `frames` repeat exactly.
    pub period_frames: f64,
    /// Std of additive Gaussian noise applied before the final clamp.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            frames: 18,
            height: 64,
            width: 64,
            slices: 1,
            n_ellipses: 3,
            motion_amplitude: 0.08,
            period_frames: 18.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.slices == 0 {
            return Err(Error::InvalidSpec(format!(
                "all dimensions must be >= 1, got T={} H={} W={} Z={}",
                self.frames, self.height, self.width, self.slices
            )));
        }
        if self.n_ellipses == 0 {
            return Err(Error::InvalidSpec("n_ellipses must be >= 1".into()));
        }
        if !(0.0..=0.25).contains(&self.motion_amplitude) {
            return Err(Error::InvalidSpec(format!(
                "motion_amplitude must lie in [0, 0.25], got {}",
                self.motion_amplitude
            )));
        }
        if !(self.period_frames > 0.0) || !self.period_frames.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "period_frames must be a positive real, got {}",
                self.period_frames
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Real-valued cine sequence with dims (T, H, W, Z), row-major, Z fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicImage {
    data: Tensor<f32>,
}

impl DynamicImage {
    pub fn from_tensor(data: Tensor<f32>) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Shape(format!(
                "DynamicImage requires dims (T, H, W, Z), got {:?}",
                data.dims()
            )));
        }
        if data.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("DynamicImage contains non-finite values".into()));
        }
        Ok(DynamicImage { data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    /// Frame `t` as an (H, W, Z) tensor.
    pub fn frame_at(&self, t: usize) -> Result<Tensor<f32>> {
        let (frames, ..) = self.dims();
        if t >= frames {
            return Err(Error::Index(format!("frame {} out of 0..{}", t, frames)));
        }
        let frame = self.data.sliced(0, t, 1)?;
        frame.reshaped(&self.data.dims()[1..])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::dmt4::write_f32(path, &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(crate::dmt4::read_f32(path)?)
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    intensity: f64,
    phase_offset: f64,
    dir_y: f64,
    dir_x: f64,
    /// Chamber ellipses oscillate radius; the rest translate.
    breathes: bool,
}

fn smoothstep01(a: f64) -> f64 {
    let a = a.clamp(0.0, 1.0);
    a * a * (3.0 - 2.0 * a)
}

/// Soft ellipse profile at normalized radial distance `d` (1.0 = the edge).
fn edge_profile(d: f64) -> f64 {
    smoothstep01((1.0 + EDGE - d) / (2.0 * EDGE))
}

fn draw_ellipses(spec: &PhantomSpec, rng: &mut ChaCha20Rng) -> Result<Vec<Ellipse>> {
    let h1 = (spec.height - 1) as f64;
    let w1 = (spec.width - 1) as f64;
    let s = spec.height.min(spec.width) as f64;
    let amp_px = spec.motion_amplitude * spec.height as f64;
    let z_shift = SLICE_SHIFT * (spec.slices - 1) as f64;

    let mut out = Vec::with_capacity(spec.n_ellipses);
    for i in 0..spec.n_ellipses {
        let breathes = i == 0;
        let (r_base, aspect) = if breathes {
            // keep the radius positive at peak contraction
            let lo = (0.12 * s).max(amp_px / 0.95 + 0.5);
            (rng.gen_range(lo..lo + 0.06 * s), rng.gen_range(0.95..1.05))
        } else {
            let lo = (0.06 * s).max(0.5);
            let hi = (0.13 * s).max(lo + 0.25);
            (rng.gen_range(lo..hi), rng.gen_range(0.8..1.25))
        };
        let ry = r_base * aspect;
        let rx = r_base / aspect;
        // widest the ellipse ever gets, including soft edge and motion
        let r_reach = ry.max(rx) + if breathes { amp_px } else { 0.0 };
        let margin_y = 1.3 * r_reach + if breathes { 0.0 } else { amp_px } + 0.5;
        let margin_x = margin_y + z_shift;
        if h1 - 2.0 * margin_y <= 0.0 || w1 - 2.0 * margin_x <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "ellipse {} would leave the {}x{} field of view (needs margin {:.1})",
                i, spec.height, spec.width, margin_y
            )));
        }
        let cy = rng.gen_range(margin_y..h1 - margin_y);
        let cx = rng.gen_range(margin_x..w1 - margin_x);
        let intensity = if breathes {
            rng.gen_range(0.75..0.95)
        } else {
            rng.gen_range(0.35..0.7)
        };
        let phase_offset = rng.gen_range(0.0..std::f64::consts::TAU);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            cy,
            cx,
            ry,
            rx,
            intensity,
            phase_offset,
            dir_y: theta.sin(),
            dir_x: theta.cos(),
            breathes,
        });
    }
    Ok(out)
}

/// Render the full cine sequence described by `spec`.
pub fn generate_cine(spec: &PhantomSpec) -> Result<DynamicImage> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let ellipses = draw_ellipses(spec, &mut rng)?;
    let amp_px = spec.motion_amplitude * spec.height as f64;
    let (t_n, h, w, z_n) = (spec.frames, spec.height, spec.width, spec.slices);

    let mut data = vec![0f32; t_n * h * w * z_n];
    for t in 0..t_n {
        // t % period is exact for integer periods, so frame t + p == frame t
        let cycle = (t as f64) % spec.period_frames / spec.period_frames;
        let base_phase = std::f64::consts::TAU * cycle;
        // per-frame ellipse state at slice 0
        let state: Vec<(f64, f64, f64, f64)> = ellipses
            .iter()
            .map(|e| {
                let osc = (base_phase + e.phase_offset).sin() * amp_px;
                if e.breathes {
                    (e.cy, e.cx, e.ry + osc, e.rx + osc)
                } else {
                    (e.cy + osc * e.dir_y, e.cx + osc * e.dir_x, e.ry, e.rx)
                }
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                for z in 0..z_n {
                    let mut v = BACKGROUND;
                    for (e, &(cy, cx, ry, rx)) in ellipses.iter().zip(&state) {
                        let dx = x as f64 - (cx + SLICE_SHIFT * z as f64);
                        let dy = y as f64 - cy;
                        let d = ((dy / ry).powi(2) + (dx / rx).powi(2)).sqrt();
                        let contrib = e.intensity * edge_profile(d);
                        v = v.max(contrib);
                    }
                    data[((t * h + y) * w + x) * z_n + z] = v as f32;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidSpec(format!("noise_sigma: {}", e)))?;
        for v in data.iter_mut() {
            let nv = *v as f64 + normal.sample(&mut rng);
            *v = nv.clamp(0.0, 1.0) as f32;
        }
    }

    DynamicImage::from_tensor(Tensor::from_vec(&[t_n, h, w, z_n], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            frames: 4,
            height: 16,
            width: 16,
            slices: 1,
            n_ellipses: 2,
            motion_amplitude: 0.1,
            period_frames: 4.0,
            noise_sigma: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn dims_and_range() {
        let img = generate_cine(&small_spec()).unwrap();
        assert_eq!(img.dims(), (4, 16, 16, 1));
        for &v in img.tensor().data() {
            assert!((0.0..=1.0).contains(&v), "value {} out of range", v);
        }
    }

    #[test]
    fn zero_motion_freezes_frames() {
        let spec = PhantomSpec {
            motion_amplitude: 0.0,
            ..small_spec()
        };
        let img = generate_cine(&spec).unwrap();
        let f0 = img.frame_at(0).unwrap();
        for t in 1..4 {
            assert_eq!(img.frame_at(t).unwrap(), f0);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_cine(&small_spec()).unwrap();
        let b = generate_cine(&small_spec()).unwrap();
        assert_eq!(a.tensor(), b.tensor());
        let c = generate_cine(&PhantomSpec {
            seed: 8,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(c.tensor(), a.tensor());
    }

    #[test]
    fn integer_period_repeats_exactly() {
        let spec = PhantomSpec {
            frames: 8,
            period_frames: 4.0,
            ..small_spec()
        };
        let img = generate_cine(&spec).unwrap();
        for t in 0..4 {
            assert_eq!(img.frame_at(t).unwrap(), img.frame_at(t + 4).unwrap());
        }
    }

    #[test]
    fn frame_index_checked() {
        let img = generate_cine(&small_spec()).unwrap();
        assert!(matches!(img.frame_at(4), Err(Error::Index(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let zero_dim = PhantomSpec {
            height: 0,
            ..small_spec()
        };
        assert!(matches!(
            generate_cine(&zero_dim),
            Err(Error::InvalidSpec(_))
        ));
        let too_fast = PhantomSpec {
            motion_amplitude: 0.3,
            ..small_spec()
        };
        assert!(matches!(
            generate_cine(&too_fast),
            Err(Error::InvalidSpec(_))
        ));
        let bad_period = PhantomSpec {
            period_frames: 0.0,
            ..small_spec()
        };
        assert!(matches!(
            generate_cine(&bad_period),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn tiny_field_reports_fov_error() {
        let spec = PhantomSpec {
            height: 4,
            width: 4,
            ..small_spec()
        };
        match generate_cine(&spec) {
            Err(Error::InvalidSpec(msg)) => assert!(msg.contains("field of view"), "{}", msg),
            other => panic!("expected invalid-spec error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn noise_stays_in_range_and_perturbs() {
        let clean = generate_cine(&small_spec()).unwrap();
        let noisy = generate_cine(&PhantomSpec {
            noise_sigma: 0.05,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(clean.tensor(), noisy.tensor());
        for &v in noisy.tensor().data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn multi_slice_shifts_content() {
        let spec = PhantomSpec {
            slices: 3,
            ..small_spec()
        };
        let img = generate_cine(&spec).unwrap();
        assert_eq!(img.dims(), (4, 16, 16, 3));
        let f = img.frame_at(0).unwrap();
        let s0 = f.sliced(2, 0, 1).unwrap();
        let s2 = f.sliced(2, 2, 1).unwrap();
        assert_ne!(s0, s2);
    }
}
