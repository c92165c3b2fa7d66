//! Deterministic synthetic fingerprints.
//!
//! A finger is a smooth ridge phase field (a radial term around a seeded
//! centre plus a few low-frequency sinusoidal warps) with one spiral phase
//! singularity per minutia, which renders as a ridge ending or bifurcation
//! at exactly the planted position. Minutia directions follow the smooth
//! field. Impressions re-render the same finger under a seeded rigid motion
//! and brightness/contrast jitter; spoofs add blur, a contrast remap and
//! sensor noise on top of an impression without moving anything.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{save_image, FingerprintImage, Liveness};
use super::manifest::{assign_splits, write_manifest, DatasetManifest, ManifestRecord, Split};
use super::minutiae::{write_minutiae, Minutia};
use crate::error::{Error, Result};

const MAX_ROTATION_DEG: f64 = 10.0;
const MAX_TRANSLATION: f64 = 8.0;
const BACKGROUND: f64 = 215.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub identity_seed: u64,
    pub impression_seed: u64,
    pub spoof: bool,
    /// Ridge frequency in cycles per pixel.
    pub ridge_frequency: f64,
    pub image_size: usize,
    pub n_minutiae: usize,
    pub spoof_blur_sigma: f64,
    /// Additive Gaussian noise, gray levels.
    pub spoof_noise_std: f64,
    /// Smooth non-rigid jitter on top of the rigid impression motion.
    pub elastic: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            identity_seed: 0,
            impression_seed: 1,
            spoof: false,
            ridge_frequency: 0.1,
            image_size: 256,
            n_minutiae: 16,
            spoof_blur_sigma: 1.0,
            spoof_noise_std: 4.0,
            elastic: false,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if !(self.ridge_frequency.is_finite() && self.ridge_frequency > 0.0) {
            return Err(Error::Param(format!(
                "ridge_frequency must be positive, got {}",
                self.ridge_frequency
            )));
        }
        if self.ridge_frequency >= 0.5 {
            return Err(Error::Param("ridge_frequency at or above Nyquist".into()));
        }
        if self.image_size < 128 {
            return Err(Error::Param(format!("image_size {} < 128", self.image_size)));
        }
        if self.n_minutiae == 0 {
            return Err(Error::Param("n_minutiae must be >= 1".into()));
        }
        if self.spoof_blur_sigma < 0.0 || self.spoof_noise_std < 0.0 {
            return Err(Error::Param("spoof blur/noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// `p' = R(rotation) (p - c) + c + t`, with `c` the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
    pub cx: f64,
    pub cy: f64,
}

impl RigidTransform {
    pub fn identity(cx: f64, cy: f64) -> Self {
        RigidTransform {
            rotation: 0.0,
            tx: 0.0,
            ty: 0.0,
            cx,
            cy,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        (
            c * dx - s * dy + self.cx + self.tx,
            s * dx + c * dy + self.cy + self.ty,
        )
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.cx - self.tx, y - self.cy - self.ty);
        (c * dx + s * dy + self.cx, -s * dx + c * dy + self.cy)
    }

    pub fn apply_minutia(&self, m: &Minutia) -> Minutia {
        let (x, y) = self.apply(m.x, m.y);
        Minutia::new(x, y, m.theta + self.rotation).with_quality(m.quality)
    }
}

fn mix_seed(a: u64, b: u64, salt: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b.rotate_left(29))
        .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Warp {
    amplitude: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

struct Singularity {
    x: f64,
    y: f64,
    polarity: f64,
}

/// Identity-level description of a finger in master coordinates.
struct Finger {
    frequency: f64,
    qx: f64,
    qy: f64,
    warps: Vec<Warp>,
    ex: f64,
    ey: f64,
    ea: f64,
    eb: f64,
    singularities: Vec<Singularity>,
    minutiae: Vec<Minutia>,
}

impl Finger {
    fn new(p: &SynthParams) -> Finger {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.identity_seed, 0, 0xF1));
        let size = p.image_size as f64;
        let c = size / 2.0;
        let f = p.ridge_frequency;

        let ang = rng.random_range(0.0..TAU);
        let dist = rng.random_range(0.0..0.8) * size;
        let (qx, qy) = (c + dist * ang.cos(), c + dist * ang.sin());
        let warps = (0..3)
            .map(|_| {
                let dir = rng.random_range(0.0..TAU);
                let wavelength = rng.random_range(0.6..1.5) * size;
                let k = TAU / wavelength;
                Warp {
                    amplitude: rng.random_range(0.2..0.6),
                    kx: k * dir.cos(),
                    ky: k * dir.sin(),
                    phase: rng.random_range(0.0..TAU),
                }
            })
            .collect();
        let ex = c + rng.random_range(-0.03..0.03) * size;
        let ey = c + rng.random_range(-0.03..0.03) * size;
        let ea = rng.random_range(0.40..0.47) * size;
        let eb = rng.random_range(0.44..0.49) * size;

        let mut finger = Finger {
            frequency: f,
            qx,
            qy,
            warps,
            ex,
            ey,
            ea,
            eb,
            singularities: Vec::new(),
            minutiae: Vec::new(),
        };

        // Keep planted minutiae far enough from the border that rigid
        // impression motion cannot push them out of the frame.
        let margin = 0.22 * size;
        let area = (size - 2.0 * margin).powi(2);
        let mut spacing = (0.6 * (area / p.n_minutiae as f64).sqrt()).max(12.0);
        let mut attempts = 0usize;
        while finger.minutiae.len() < p.n_minutiae {
            attempts += 1;
            if attempts % 4000 == 0 {
                spacing *= 0.8;
            }
            let x = rng.random_range(margin..size - margin);
            let y = rng.random_range(margin..size - margin);
            if finger.mask(x, y) < 1.0 || ((x - qx).hypot(y - qy)) < 12.0 {
                continue;
            }
            if finger
                .minutiae
                .iter()
                .any(|m| (m.x - x).hypot(m.y - y) < spacing)
            {
                continue;
            }
            let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let quality = rng.random_range(0.4..1.0);
            let theta = finger.orientation(x, y);
            finger.singularities.push(Singularity { x, y, polarity });
            finger
                .minutiae
                .push(Minutia::new(x, y, theta).with_quality(quality));
        }
        finger
    }

    /// Smooth phase gradient in cycles per pixel.
    fn phase_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.qx, y - self.qy);
        let r = dx.hypot(dy).max(1e-9);
        let mut gx = self.frequency * dx / r;
        let mut gy = self.frequency * dy / r;
        for w in &self.warps {
            let d = w.amplitude * (w.kx * x + w.ky * y + w.phase).cos() / TAU;
            gx += d * w.kx;
            gy += d * w.ky;
        }
        (gx, gy)
    }

    /// Ridge flow direction: the phase gradient turned by +90°.
    fn orientation(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = self.phase_gradient(x, y);
        gy.atan2(gx) + PI / 2.0
    }

    fn mask(&self, x: f64, y: f64) -> f64 {
        let d = ((x - self.ex) / self.ea).hypot((y - self.ey) / self.eb);
        ((1.0 - d) / 0.06).clamp(0.0, 1.0)
    }

    /// Gray level of the clean master print at `(x, y)`.
    fn intensity(&self, x: f64, y: f64) -> f64 {
        let m = self.mask(x, y);
        if m <= 0.0 {
            return BACKGROUND;
        }
        let mut phase = TAU * self.frequency * (x - self.qx).hypot(y - self.qy);
        for w in &self.warps {
            phase += w.amplitude * (w.kx * x + w.ky * y + w.phase).sin();
        }
        for s in &self.singularities {
            phase += s.polarity * (y - s.y).atan2(x - s.x);
        }
        let ridge = 0.5 * (1.0 + phase.cos());
        let fg = 30.0 + 190.0 * ridge;
        m * fg + (1.0 - m) * BACKGROUND
    }
}

struct Elastic {
    amplitude: f64,
    k: f64,
    p1: f64,
    p2: f64,
}

impl Elastic {
    fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.amplitude * (self.k * y + self.p1).sin(),
            self.amplitude * (self.k * x + self.p2).sin(),
        )
    }

    /// Solves `q + e(q) = m` by fixed-point iteration (e is a contraction).
    fn undo(&self, mx: f64, my: f64) -> (f64, f64) {
        let (mut qx, mut qy) = (mx, my);
        for _ in 0..50 {
            let (ex, ey) = self.displacement(qx, qy);
            qx = mx - ex;
            qy = my - ey;
        }
        (qx, qy)
    }
}

struct Impression {
    transform: RigidTransform,
    gain: f64,
    offset: f64,
    elastic: Option<Elastic>,
}

fn impression(p: &SynthParams) -> Impression {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.identity_seed, p.impression_seed, 0x1A));
    let c = p.image_size as f64 / 2.0;
    let max_rot = MAX_ROTATION_DEG.to_radians();
    let transform = RigidTransform {
        rotation: rng.random_range(-max_rot..=max_rot),
        tx: rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        ty: rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION),
        cx: c,
        cy: c,
    };
    let gain = rng.random_range(0.85..1.15);
    let offset = rng.random_range(-12.0..12.0);
    let elastic = p.elastic.then(|| Elastic {
        amplitude: 2.0,
        k: TAU * 1.5 / p.image_size as f64,
        p1: rng.random_range(0.0..TAU),
        p2: rng.random_range(0.0..TAU),
    });
    Impression {
        transform,
        gain,
        offset,
        elastic,
    }
}

/// The rigid motion applied to master coordinates for this impression.
pub fn impression_transform(p: &SynthParams) -> Result<RigidTransform> {
    p.validate()?;
    Ok(impression(p).transform)
}

/// Minutiae of the finger in master (untransformed) coordinates.
pub fn master_minutiae(p: &SynthParams) -> Result<Vec<Minutia>> {
    p.validate()?;
    Ok(Finger::new(p).minutiae)
}

/// Renders one impression and its minutiae. Pure function of `params`.
pub fn synth_generate(params: &SynthParams) -> Result<(FingerprintImage, Vec<Minutia>)> {
    params.validate()?;
    let finger = Finger::new(params);
    let imp = impression(params);
    let n = params.image_size;

    let mut gray = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let (mut qx, mut qy) = imp.transform.invert(x as f64, y as f64);
            if let Some(e) = &imp.elastic {
                let (dx, dy) = e.displacement(qx, qy);
                qx += dx;
                qy += dy;
            }
            let g = finger.intensity(qx, qy);
            gray[y * n + x] = 128.0 + imp.gain * (g - 128.0) + imp.offset;
        }
    }

    if params.spoof {
        gray = spoof_transform(&gray, n, params);
    }

    let pixels = gray
        .iter()
        .map(|&g| g.round().clamp(0.0, 255.0) as u8)
        .collect();
    let liveness = if params.spoof {
        Liveness::Spoof
    } else {
        Liveness::Live
    };
    let mut image = FingerprintImage::new(n, n, pixels)?;
    image.liveness = liveness;
    image.sensor_tag = "synthetic".into();

    let minutiae = finger
        .minutiae
        .iter()
        .map(|m| {
            let base = match &imp.elastic {
                Some(e) => {
                    let (qx, qy) = e.undo(m.x, m.y);
                    Minutia::new(qx, qy, m.theta).with_quality(m.quality)
                }
                None => *m,
            };
            imp.transform.apply_minutia(&base)
        })
        .collect();
    Ok((image, minutiae))
}

fn spoof_transform(gray: &[f64], n: usize, p: &SynthParams) -> Vec<f64> {
    let blurred = if p.spoof_blur_sigma > 0.0 {
        gaussian_blur(gray, n, n, p.spoof_blur_sigma)
    } else {
        gray.to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(p.identity_seed, p.impression_seed, 0x5F));
    let noise = Normal::new(0.0, p.spoof_noise_std.max(1e-12)).unwrap();
    blurred
        .iter()
        .map(|&g| {
            // compressed, slightly brightened dynamic range of a cast
            let remapped = 140.0 + 0.7 * (g - 128.0);
            let eps = if p.spoof_noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            remapped + eps
        })
        .collect()
}

/// Separable Gaussian blur with clamped borders.
pub(crate) fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * src[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Layout of a synthetic dataset written by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthDatasetSpec {
    pub n_fingers: usize,
    pub n_impressions: usize,
    /// Fraction of live captures that also get a spoof twin.
    pub spoof_ratio: f64,
    /// Fraction of fingers held out (all their images) as the test split.
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub template: SynthParams,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n_fingers: 10,
            n_impressions: 4,
            spoof_ratio: 1.0,
            test_fraction: 0.4,
            val_fraction: 0.2,
            seed: 0,
            template: SynthParams::default(),
        }
    }
}

/// Generates images, minutiae sidecars and `manifest.json` under `out_dir`.
pub fn generate_dataset(spec: &SynthDatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.n_fingers == 0 || spec.n_impressions == 0 {
        return Err(Error::Param("n_fingers and n_impressions must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.spoof_ratio) || !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Param("spoof_ratio/test_fraction out of range".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let n_test = (spec.n_fingers as f64 * spec.test_fraction).round() as usize;
    let first_test = spec.n_fingers - n_test;

    let mut live: Vec<(u32, u32)> = Vec::new();
    for f in 0..spec.n_fingers as u32 {
        for i in 1..=spec.n_impressions as u32 {
            live.push((f, i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0, 0x5E));
    let mut order = live.clone();
    order.shuffle(&mut rng);
    let n_spoof = (spec.spoof_ratio * live.len() as f64).round() as usize;
    let mut spoofed: Vec<(u32, u32)> = order[..n_spoof].to_vec();
    spoofed.sort_unstable();

    let mut jobs: Vec<(u32, u32, bool)> = live.iter().map(|&(f, i)| (f, i, false)).collect();
    jobs.extend(spoofed.iter().map(|&(f, i)| (f, i, true)));
    jobs.sort_unstable();

    let mut records = Vec::with_capacity(jobs.len());
    for (f, i, spoof) in jobs {
        let params = SynthParams {
            identity_seed: mix_seed(spec.seed, f as u64, 0x1D),
            impression_seed: i as u64,
            spoof,
            ..spec.template.clone()
        };
        let (mut image, minutiae) = synth_generate(&params)?;
        image.finger_id = f;
        image.impression_id = i;
        let tag = if spoof { "spoof" } else { "live" };
        let stem = format!("f{f:03}_i{i:02}_{tag}");
        let img_name = format!("{stem}.png");
        let min_name = format!("{stem}.txt");
        save_image(&image, &out_dir.join(&img_name))?;
        write_minutiae(&out_dir.join(&min_name), &minutiae)?;
        records.push(ManifestRecord {
            image: img_name.into(),
            minutiae: min_name.into(),
            finger_id: f,
            impression_id: i,
            liveness: image.liveness,
            split: if (f as usize) >= first_test {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    if first_test > 0 {
        assign_splits(&mut records, spec.val_fraction, mix_seed(spec.seed, 1, 0x5A))?;
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.validate()?;
    write_manifest(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(identity: u64, impression: u64, spoof: bool) -> SynthParams {
        SynthParams {
            identity_seed: identity,
            impression_seed: impression,
            spoof,
            ..SynthParams::default()
        }
    }

    #[test]
    fn deterministic() {
        let p = params(3, 2, true);
        let (a, ma) = synth_generate(&p).unwrap();
        let (b, mb) = synth_generate(&p).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(ma, mb);
    }

    #[test]
    fn impressions_differ_by_known_rigid_transform() {
        let p1 = params(11, 1, false);
        let p2 = params(11, 2, false);
        let (_, m1) = synth_generate(&p1).unwrap();
        let (_, m2) = synth_generate(&p2).unwrap();
        let t1 = impression_transform(&p1).unwrap();
        let t2 = impression_transform(&p2).unwrap();
        assert_ne!(t1, t2);
        let mut max_residual: f64 = 0.0;
        for (a, b) in m1.iter().zip(&m2) {
            let (mx, my) = t1.invert(a.x, a.y);
            let (x2, y2) = t2.apply(mx, my);
            max_residual = max_residual.max((x2 - b.x).hypot(y2 - b.y));
            let dtheta = (b.theta - a.theta - (t2.rotation - t1.rotation)).rem_euclid(TAU);
            assert!(dtheta < 1e-9 || TAU - dtheta < 1e-9);
        }
        assert!(max_residual < 0.5, "{max_residual}");
        assert!(m1.iter().zip(&m2).any(|(a, b)| (a.x - b.x).abs() > 0.5));
    }

    #[test]
    fn spoof_keeps_minutiae_and_changes_pixels() {
        let (live, ml) = synth_generate(&params(5, 3, false)).unwrap();
        let (spoof, ms) = synth_generate(&params(5, 3, true)).unwrap();
        assert_eq!(ml, ms);
        let mad: f64 = live
            .pixels
            .iter()
            .zip(&spoof.pixels)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / live.pixels.len() as f64;
        assert!(mad > 0.0);
        assert_eq!(spoof.liveness, Liveness::Spoof);
    }

    #[test]
    fn minutiae_inside_image_and_template_positions_fixed() {
        for id in 0..20 {
            let p = params(id, 7, false);
            let (img, ms) = synth_generate(&p).unwrap();
            assert_eq!(ms.len(), p.n_minutiae);
            assert!(ms.iter().all(|m| m.inside(img.width, img.height)));
            assert!(ms.iter().all(|m| (0.0..TAU).contains(&m.theta)));
            let master = master_minutiae(&p).unwrap();
            let master2 = master_minutiae(&params(id, 99, true)).unwrap();
            assert_eq!(master, master2);
        }
    }

    #[test]
    fn elastic_flag_keeps_correspondence_close() {
        let mut p = params(2, 4, false);
        p.elastic = true;
        let (_, ms) = synth_generate(&p).unwrap();
        let rigid = synth_generate(&params(2, 4, false)).unwrap().1;
        for (a, b) in ms.iter().zip(&rigid) {
            assert!((a.x - b.x).hypot(a.y - b.y) < 3.0);
        }
    }

    #[test]
    fn degenerate_params_rejected() {
        let mut p = SynthParams::default();
        p.ridge_frequency = 0.0;
        assert!(matches!(synth_generate(&p), Err(Error::Param(_))));
        let p = SynthParams {
            image_size: 64,
            ..SynthParams::default()
        };
        assert!(synth_generate(&p).is_err());
        let p = SynthParams {
            n_minutiae: 0,
            ..SynthParams::default()
        };
        assert!(synth_generate(&p).is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let src = vec![42.0; 30 * 20];
        let out = gaussian_blur(&src, 30, 20, 1.5);
        assert!(out.iter().all(|v| (v - 42.0).abs() < 1e-9));
    }

    #[test]
    fn dataset_counts_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec {
            n_fingers: 5,
            n_impressions: 2,
            template: SynthParams {
                image_size: 128,
                n_minutiae: 4,
                ..SynthParams::default()
            },
            ..SynthDatasetSpec::default()
        };
        let m = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(m.records.len(), 20);
        assert_eq!(m.count(Split::Test), 8);
        let reloaded = super::super::load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded.records, m.records);
    }
}
