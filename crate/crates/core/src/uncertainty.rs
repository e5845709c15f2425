//! Monte-Carlo dropout sampling and the epistemic/aleatoric split of the
//! predictive variance.
//!
//! With `T` stochastic passes producing means `ŷ₍ₜ₎` and variances `σ̂²₍ₜ₎`,
//! per pixel:
//!
//! ```text
//! aleatoric  = (1/T) Σ σ̂²₍ₜ₎
//! epistemic  = (1/T) Σ ŷ²₍ₜ₎ − ((1/T) Σ ŷ₍ₜ₎)²
//! predictive = aleatoric + epistemic
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{DropoutStreams, Network};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Negative epistemic values above this are treated as rounding and clamped.
pub const EPISTEMIC_FLOOR: f64 = -1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    /// Number of stochastic forward passes `T`.
    pub samples: usize,
    pub seed: u64,
    /// Passes evaluated together in one batched forward.
    pub chunk: usize,
}

impl Default for MCConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            seed: 0,
            chunk: 10,
        }
    }
}

/// One stochastic pass: predicted mean and predicted variance `σ̂²`.
#[derive(Debug, Clone, PartialEq)]
pub struct McSample {
    pub mean: Image,
    pub variance: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMaps {
    pub mean_prediction: Image,
    pub epistemic: Image,
    pub aleatoric: Image,
    pub predictive: Image,
}

/// `T` dropout-active passes over `x`. Pass `t` draws its masks from
/// stream `t` of `cfg.seed`, so results do not depend on chunking or on
/// how passes are spread over threads.
pub fn mc_sample<N: Network>(model: &N, x: &Image, cfg: &MCConfig) -> Result<Vec<McSample>> {
    if !model.two_heads() {
        return Err(Error::Contract(
            "uncertainty sampling needs a two-headed model".into(),
        ));
    }
    if model.dropout_rate() <= 0.0 {
        return Err(Error::Contract(
            "epistemic requires stochastic weights".into(),
        ));
    }
    mc_sample_unchecked(model, x, cfg)
}

/// [`mc_sample`] without the dropout-rate check.
#[doc(hidden)]
pub fn mc_sample_unchecked<N: Network>(
    model: &N,
    x: &Image,
    cfg: &MCConfig,
) -> Result<Vec<McSample>> {
    if !model.two_heads() {
        return Err(Error::Contract(
            "uncertainty sampling needs a two-headed model".into(),
        ));
    }
    if cfg.samples == 0 {
        return Err(Error::Contract("at least one sample is required".into()));
    }
    let chunk = cfg.chunk.max(1);
    let starts: Vec<usize> = (0..cfg.samples).step_by(chunk).collect();
    let per_chunk: Vec<Result<Vec<McSample>>> = starts
        .par_iter()
        .map(|&first| {
            let n = chunk.min(cfg.samples - first);
            run_chunk(model, x, cfg.seed, first, n)
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.samples);
    for r in per_chunk {
        out.extend(r?);
    }
    Ok(out)
}

fn run_chunk<N: Network>(
    model: &N,
    x: &Image,
    seed: u64,
    first: usize,
    n: usize,
) -> Result<Vec<McSample>> {
    let single = x.to_tensor();
    let batch = Tensor::stack_batch(&vec![&single; n])?;
    let mut streams = DropoutStreams::per_item(seed, first as u64, n);
    let mut tape = Tape::new();
    let (_, heads) = model.run(&mut tape, batch, Some(&mut streams), false)?;
    let s = heads
        .log_var
        .ok_or_else(|| Error::Contract("model produced no variance head".into()))?;
    let means = tape.value(heads.mean);
    let log_vars = tape.value(s);
    (0..n)
        .map(|i| {
            let mean = Image::from_tensor(&means.batch_item(i))?;
            let variance = Image::from_tensor(&log_vars.batch_item(i))?.map(f64::exp);
            Ok(McSample { mean, variance })
        })
        .collect()
}

/// Splits the predictive variance of `samples` into its two terms.
pub fn decompose(samples: &[McSample]) -> Result<UncertaintyMaps> {
    if samples.len() < 2 {
        return Err(Error::Contract(format!(
            "decomposition needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (w, h) = (samples[0].mean.width(), samples[0].mean.height());
    for s in samples {
        if !s.mean.same_size(w, h) || !s.variance.same_size(w, h) {
            return Err(Error::Shape("samples disagree in image size".into()));
        }
    }
    let n = w * h;
    let t = samples.len() as f64;
    let mut mean = vec![0.0; n];
    let mut aleatoric = vec![0.0; n];
    for s in samples {
        for i in 0..n {
            mean[i] += s.mean.data()[i];
            aleatoric[i] += s.variance.data()[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= t);
    aleatoric.iter_mut().for_each(|a| *a /= t);
    // One correction pass on both averages removes most of the summation
    // error, so a constant stack averages back to that constant exactly.
    let mut mean_fix = vec![0.0; n];
    let mut aleatoric_fix = vec![0.0; n];
    for s in samples {
        for i in 0..n {
            mean_fix[i] += s.mean.data()[i] - mean[i];
            aleatoric_fix[i] += s.variance.data()[i] - aleatoric[i];
        }
    }
    for i in 0..n {
        mean[i] += mean_fix[i] / t;
        aleatoric[i] += aleatoric_fix[i] / t;
    }
    // The moment difference is evaluated in centred form (mean squared
    // deviation), which gives exactly zero for identical samples.
    let mut epistemic = vec![0.0; n];
    for s in samples {
        for i in 0..n {
            let d = s.mean.data()[i] - mean[i];
            epistemic[i] += d * d;
        }
    }
    let mut predictive = vec![0.0; n];
    for i in 0..n {
        let mut e = epistemic[i] / t;
        if e < 0.0 {
            if e < EPISTEMIC_FLOOR {
                return Err(Error::Contract(format!(
                    "negative epistemic variance {e} at pixel {i}"
                )));
            }
            e = 0.0;
        }
        if !(aleatoric[i] >= 0.0) {
            return Err(Error::Domain(format!(
                "invalid predicted variance at pixel {i}"
            )));
        }
        epistemic[i] = e;
        predictive[i] = e + aleatoric[i];
    }
    Ok(UncertaintyMaps {
        mean_prediction: Image::new(w, h, mean)?,
        epistemic: Image::new(w, h, epistemic)?,
        aleatoric: Image::new(w, h, aleatoric)?,
        predictive: Image::new(w, h, predictive)?,
    })
}

pub fn predict_with_uncertainty<N: Network>(
    model: &N,
    x: &Image,
    cfg: &MCConfig,
) -> Result<UncertaintyMaps> {
    decompose(&mc_sample(model, x, cfg)?)
}
