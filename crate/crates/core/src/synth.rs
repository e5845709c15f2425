//! Synthetic paired "head phantom" images.
//!
//! Each subject is an ellipse-shaped head with a bright skull ring, a soft
//! tissue interior carrying a faint smooth texture and a few internal
//! blobs. The input `x` is the "modality A" rendering; the target is a
//! region-wise affine remap of `x` (contrast inverted inside the head, the
//! skull mapped dark) plus Gaussian noise whose standard deviation takes one
//! value inside the head and another outside it.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::pgm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub size: usize,
    /// Number of healthy subjects in the pool.
    pub subjects: usize,
    pub sigma_background: f64,
    pub sigma_body: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            subjects: 50,
            sigma_background: 0.02,
            sigma_body: 0.10,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(1 << depth) {
            return Err(Error::Domain(format!(
                "phantom size {} must be at least 16 and divisible by 2^{depth}",
                self.size
            )));
        }
        for s in [self.sigma_background, self.sigma_body] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Domain(format!("noise std {s} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Seed of pool subject `index`, derived from the pool seed.
    pub fn subject_seed(&self, index: u64) -> u64 {
        splitmix(self.seed ^ splitmix(index.wrapping_add(0x5EED)))
    }
}

/// SplitMix64 finaliser; decorrelates nearby integer seeds.
pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub subject_seed: u64,
    pub x: Image,
    pub y: Image,
    pub y_clean: Image,
    /// Per-pixel standard deviation of the noise added to `y_clean`.
    pub noise_sigma: Image,
    pub body_mask: Mask,
    pub anomaly_mask: Option<Mask>,
}

impl PairedSample {
    pub fn width(&self) -> usize {
        self.x.width()
    }

    pub fn height(&self) -> usize {
        self.x.height()
    }

    fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        Self {
            subject_seed: self.subject_seed,
            x: self.x.crop(top, left, h, w),
            y: self.y.crop(top, left, h, w),
            y_clean: self.y_clean.crop(top, left, h, w),
            noise_sigma: self.noise_sigma.crop(top, left, h, w),
            body_mask: self.body_mask.crop(top, left, h, w),
            anomaly_mask: self.anomaly_mask.as_ref().map(|m| m.crop(top, left, h, w)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Squared normalised radius of pixel centre `(row, col)`.
    fn rho2(&self, row: usize, col: usize) -> f64 {
        let dx = col as f64 + 0.5 - self.cx;
        let dy = row as f64 + 0.5 - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    fn contains(&self, row: usize, col: usize) -> bool {
        self.rho2(row, col) <= 1.0
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            a: self.a * k,
            b: self.b * k,
            ..*self
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Region {
    Background,
    Skull,
    Tissue,
}

/// Region-wise affine map from input to clean target intensity.
fn target_intensity(region: Region, x: f64) -> f64 {
    match region {
        Region::Background => 0.0,
        Region::Skull => 0.25 - 0.15 * (x - 0.9),
        Region::Tissue => 0.95 - 0.9 * x,
    }
}

/// Draws subject `subject_seed`. Deterministic in the seed and `cfg`.
pub fn generate_pair(subject_seed: u64, cfg: &PhantomConfig) -> PairedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let s = cfg.size as f64;
    let n = cfg.size;

    let head = Ellipse::new(
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
        s / 2.0 + rng.random_range(-0.05..0.05) * s,
        rng.random_range(0.35..0.42) * s,
        rng.random_range(0.29..0.36) * s,
        rng.random_range(-0.3..0.3),
    );
    let thickness = rng.random_range(2.5..4.0) * s / 64.0;
    let brain = head.scaled(1.0 - thickness / head.b);

    let blob_count = rng.random_range(2..=4);
    let blobs: Vec<(Ellipse, f64)> = (0..blob_count)
        .map(|_| {
            let r = 0.55 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let (u, v) = (r * brain.a * phi.cos(), r * brain.b * phi.sin());
            let cx = brain.cx + u * brain.cos - v * brain.sin;
            let cy = brain.cy + u * brain.sin + v * brain.cos;
            let e = Ellipse::new(
                cx,
                cy,
                rng.random_range(0.06..0.13) * s,
                rng.random_range(0.05..0.11) * s,
                rng.random_range(0.0..PI),
            );
            (e, rng.random_range(-0.12..0.15))
        })
        .collect();

    let skull_level = rng.random_range(0.85..0.95);
    let tissue_level = 0.40 + rng.random_range(-0.03..0.03);
    let tex: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.004..0.012),
                rng.random_range(0.5..2.5) * 2.0 * PI / s,
                rng.random_range(0.5..2.5) * 2.0 * PI / s,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();

    let mut x = Image::filled(n, n, 0.0);
    let mut y_clean = Image::filled(n, n, 0.0);
    let mut sigma = Image::filled(n, n, cfg.sigma_background);
    let mut body = Mask::filled(n, n, false);
    for row in 0..n {
        for col in 0..n {
            let region = if !head.contains(row, col) {
                Region::Background
            } else if !brain.contains(row, col) {
                Region::Skull
            } else {
                Region::Tissue
            };
            let texture: f64 = tex
                .iter()
                .map(|(amp, fx, fy, ph)| amp * (fx * col as f64 + fy * row as f64 + ph).sin())
                .sum();
            let value = match region {
                Region::Background => 0.0,
                Region::Skull => skull_level + 0.5 * texture,
                Region::Tissue => {
                    let offset: f64 = blobs
                        .iter()
                        .filter(|(e, _)| e.contains(row, col))
                        .map(|(_, d)| *d)
                        .next_back()
                        .unwrap_or(0.0);
                    tissue_level + offset + texture
                }
            };
            x.set(row, col, value.clamp(0.0, 1.0));
            y_clean.set(row, col, target_intensity(region, x.get(row, col)));
            if region != Region::Background {
                body.set(row, col, true);
                sigma.set(row, col, cfg.sigma_body);
            }
        }
    }

    let mut y = y_clean.clone();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (v, sd) in y.data_mut().iter_mut().zip(sigma.data()) {
        *v += sd * std_normal.sample(&mut rng);
    }

    PairedSample {
        subject_seed,
        x,
        y,
        y_clean,
        noise_sigma: sigma,
        body_mask: body,
        anomaly_mask: None,
    }
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to the input.
pub fn add_input_noise(
    sample: &PairedSample,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<PairedSample> {
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "noise std {sigma} must be non-negative"
        )));
    }
    let mut out = sample.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    for v in out.x.data_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// Writes a `side × side` all-zero square into the input at a uniformly
/// random position lying fully inside the body mask, or, when no such
/// position exists, one whose centre pixel is inside the body mask.
pub fn insert_anomaly(
    sample: &PairedSample,
    side: usize,
    rng: &mut impl Rng,
) -> Result<PairedSample> {
    let (h, w) = (sample.height(), sample.width());
    if side == 0 || side >= h.min(w) {
        return Err(Error::Domain(format!(
            "anomaly side {side} must be in 1..{}",
            h.min(w)
        )));
    }
    let (top, left) = anomaly_position(&sample.body_mask, side, rng)
        .ok_or_else(|| Error::Domain("body mask has no room for the anomaly".into()))?;
    let mut out = sample.clone();
    let mut mask = Mask::filled(w, h, false);
    for r in top..top + side {
        for c in left..left + side {
            out.x.set(r, c, 0.0);
            mask.set(r, c, true);
        }
    }
    out.anomaly_mask = Some(mask);
    Ok(out)
}

fn anomaly_position(body: &Mask, side: usize, rng: &mut impl Rng) -> Option<(usize, usize)> {
    let (h, w) = (body.height(), body.width());
    // summed-area table of the body mask
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            sat[(r + 1) * (w + 1) + c + 1] =
                body.get(r, c) as usize + sat[r * (w + 1) + c + 1] + sat[(r + 1) * (w + 1) + c]
                    - sat[r * (w + 1) + c];
        }
    }
    let area = |t: usize, l: usize| {
        let (b, r) = (t + side, l + side);
        sat[b * (w + 1) + r] + sat[t * (w + 1) + l] - sat[t * (w + 1) + r] - sat[b * (w + 1) + l]
    };
    let mut inside = Vec::new();
    let mut centred = Vec::new();
    for t in 0..=h - side {
        for l in 0..=w - side {
            if area(t, l) == side * side {
                inside.push((t, l));
            } else if body.get(t + side / 2, l + side / 2) {
                centred.push((t, l));
            }
        }
    }
    let pool = if inside.is_empty() { centred } else { inside };
    if pool.is_empty() {
        None
    } else {
        Some(pool[rng.random_range(0..pool.len())])
    }
}

/// Window origins along one axis; the last window snaps to the edge.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + patch < extent)
        .collect();
    starts.push(extent - patch);
    starts
}

/// Overlapping `patch × patch` crops covering every pixel.
pub fn extract_patches(
    sample: &PairedSample,
    patch: usize,
    stride: usize,
) -> Result<Vec<PairedSample>> {
    let (h, w) = (sample.height(), sample.width());
    if patch == 0 || patch > h || patch > w {
        return Err(Error::Domain(format!(
            "patch {patch} larger than image {h}x{w}"
        )));
    }
    if stride == 0 || stride > patch {
        return Err(Error::Domain(format!(
            "patch stride {stride} must be in 1..={patch} to cover every pixel"
        )));
    }
    let rows = window_starts(h, patch, stride);
    let cols = window_starts(w, patch, stride);
    Ok(rows
        .iter()
        .flat_map(|&t| cols.iter().map(move |&l| (t, l)))
        .map(|(t, l)| sample.crop(t, l, patch, patch))
        .collect())
}

#[derive(Serialize)]
struct SampleMeta<'a> {
    subject_seed: u64,
    sigma_background: f64,
    sigma_body: f64,
    size: usize,
    anomaly: bool,
    x_range: &'a pgm::Quantization,
    y_range: &'a pgm::Quantization,
}

/// Dumps `x.pgm`, `y.pgm`, `masks.pgm` and `meta.json` into `dir`.
pub fn dump_sample(
    dir: impl AsRef<Path>,
    sample: &PairedSample,
    cfg: &PhantomConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let qx = pgm::write_scaled(dir.join("x.pgm"), &sample.x)?;
    let qy = pgm::write_scaled(dir.join("y.pgm"), &sample.y)?;
    let labels = pgm::mask_labels(&sample.body_mask, sample.anomaly_mask.as_ref());
    pgm::write_labels(
        dir.join("masks.pgm"),
        sample.width(),
        sample.height(),
        &labels,
        3,
    )?;
    let meta = SampleMeta {
        subject_seed: sample.subject_seed,
        sigma_background: cfg.sigma_background,
        sigma_body: cfg.sigma_body,
        size: cfg.size,
        anomaly: sample.anomaly_mask.is_some(),
        x_range: &qx,
        y_range: &qy,
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}
