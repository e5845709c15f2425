//! Masked statistics, percentile bootstrap intervals and image metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Mean of `map` over the pixels where `mask` is set.
pub fn masked_mean(map: &Image, mask: &Mask) -> Result<f64> {
    if !map.same_size(mask.width(), mask.height()) {
        return Err(Error::Shape("map and mask sizes differ".into()));
    }
    let (sum, n) = map
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    if n == 0 {
        return Err(Error::Domain("masked mean over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CIResult {
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub resamples: usize,
}

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Fewest bootstrap resamples [`bootstrap_ci`] accepts.
pub const MIN_RESAMPLES: usize = 100;

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<CIResult> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "bootstrap needs at least 2 values, got {}",
            values.len()
        )));
    }
    if resamples < MIN_RESAMPLES {
        return Err(Error::Domain(format!(
            "at least {MIN_RESAMPLES} resamples required, got {resamples}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("bootstrap over non-finite values".into()));
    }
    let point = mean(values);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lower = quantile_sorted(&means, alpha).min(point);
    let upper = quantile_sorted(&means, 1.0 - alpha).max(point);
    Ok(CIResult {
        point_estimate: point,
        lower,
        upper,
        level,
        resamples,
    })
}

impl CIResult {
    pub fn overlaps(&self, other: &CIResult) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Peak signal-to-noise ratio in dB for unit peak; `+inf` when `mse == 0`.
    pub psnr: f64,
}

pub const PSNR_PEAK: f64 = 1.0;

pub fn image_metrics(y: &Image, y_hat: &Image, mask: Option<&Mask>) -> Result<ImageMetrics> {
    if !y.same_size(y_hat.width(), y_hat.height()) {
        return Err(Error::Shape("images differ in size".into()));
    }
    if let Some(m) = mask {
        if !y.same_size(m.width(), m.height()) {
            return Err(Error::Shape("mask size differs from images".into()));
        }
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for (i, (a, b)) in y.data().iter().zip(y_hat.data()).enumerate() {
        if mask.is_some_and(|m| !m.data()[i]) {
            continue;
        }
        let d = a - b;
        se += d * d;
        ae += d.abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Domain("metrics over an empty mask".into()));
    }
    let mse = se / n as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_PEAK * PSNR_PEAK / mse).log10()
    };
    Ok(ImageMetrics {
        mse,
        mae: ae / n as f64,
        psnr,
    })
}
