//! Flat `key = value` experiment configuration.
//!
//! Values come from three layers: built-in defaults, an optional config
//! file, then command-line overrides. Later layers win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uqsynth_core::metrics::MIN_RESAMPLES;
use uqsynth_core::nn::UNetConfig;
use uqsynth_core::synth::PhantomConfig;
use uqsynth_core::train::{OptimHyper, TrainConfig};
use uqsynth_core::uncertainty::MCConfig;

use crate::HarnessError;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "UQSYNTH_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub seed: u64,
    pub image_size: usize,
    pub pool_subjects: usize,
    pub held_out: usize,
    pub val_subjects: usize,
    pub sigma_background: f64,
    pub sigma_body: f64,

    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f64,

    pub patch_size: usize,
    pub patch_stride: usize,
    /// Minimum patches seen per epoch, so that patience and the epoch cap
    /// mean the same number of optimiser steps at every training-set size.
    pub epoch_patches: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,

    pub mc_samples: usize,
    pub mc_chunk: usize,
    pub bootstrap_resamples: usize,
    pub ci_level: f64,

    pub sizes: Vec<usize>,
    pub levels: Vec<f64>,
    pub noise_model_size: usize,
    pub anomaly_model_size: usize,
    pub anomaly_side: usize,
    pub anomalies_per_subject: usize,

    pub threads: usize,
    pub verbose: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let unet = UNetConfig::default();
        let phantom = PhantomConfig::default();
        let train = TrainConfig::default();
        let hyper = OptimHyper::default();
        Self {
            seed: 0,
            image_size: phantom.size,
            pool_subjects: phantom.subjects,
            held_out: 5,
            val_subjects: 5,
            sigma_background: phantom.sigma_background,
            sigma_body: phantom.sigma_body,
            base_channels: unet.base_channels,
            depth: unet.depth,
            dropout: unet.dropout_rate,
            patch_size: 32,
            patch_stride: 16,
            epoch_patches: 405,
            max_epochs: train.max_epochs,
            patience: train.plateau_patience,
            min_delta: train.plateau_min_delta,
            learning_rate: hyper.learning_rate,
            weight_decay: hyper.weight_decay,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            epsilon: hyper.epsilon,
            batch_size: hyper.batch_size,
            mc_samples: MCConfig::default().samples,
            mc_chunk: MCConfig::default().chunk,
            bootstrap_resamples: 1000,
            ci_level: 0.95,
            sizes: vec![3, 5, 15, 45],
            levels: vec![0.05, 0.10, 0.15, 0.20, 0.25],
            noise_model_size: 45,
            anomaly_model_size: 15,
            anomaly_side: 10,
            anomalies_per_subject: 5,
            threads: 1,
            verbose: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, HarnessError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {s:?}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .trim()
        .parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HarnessError::Config(format!("line {}: expected key=value", lineno + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl HarnessConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "seed" => self.seed = parse_one(key, value)?,
            "image_size" => self.image_size = parse_one(key, value)?,
            "pool_subjects" => self.pool_subjects = parse_one(key, value)?,
            "held_out" => self.held_out = parse_one(key, value)?,
            "val_subjects" => self.val_subjects = parse_one(key, value)?,
            "sigma_background" => self.sigma_background = parse_one(key, value)?,
            "sigma_body" => self.sigma_body = parse_one(key, value)?,
            "base_channels" => self.base_channels = parse_one(key, value)?,
            "depth" => self.depth = parse_one(key, value)?,
            "dropout" => self.dropout = parse_one(key, value)?,
            "patch_size" => self.patch_size = parse_one(key, value)?,
            "patch_stride" => self.patch_stride = parse_one(key, value)?,
            "epoch_patches" => self.epoch_patches = parse_one(key, value)?,
            "max_epochs" => self.max_epochs = parse_one(key, value)?,
            "patience" => self.patience = parse_one(key, value)?,
            "min_delta" => self.min_delta = parse_one(key, value)?,
            "learning_rate" => self.learning_rate = parse_one(key, value)?,
            "weight_decay" => self.weight_decay = parse_one(key, value)?,
            "beta1" => self.beta1 = parse_one(key, value)?,
            "beta2" => self.beta2 = parse_one(key, value)?,
            "epsilon" => self.epsilon = parse_one(key, value)?,
            "batch_size" => self.batch_size = parse_one(key, value)?,
            "mc_samples" => self.mc_samples = parse_one(key, value)?,
            "mc_chunk" => self.mc_chunk = parse_one(key, value)?,
            "bootstrap_resamples" => self.bootstrap_resamples = parse_one(key, value)?,
            "ci_level" => self.ci_level = parse_one(key, value)?,
            "sizes" => self.sizes = parse_list(key, value)?,
            "levels" => self.levels = parse_list(key, value)?,
            "noise_model_size" => self.noise_model_size = parse_one(key, value)?,
            "anomaly_model_size" => self.anomaly_model_size = parse_one(key, value)?,
            "anomaly_side" => self.anomaly_side = parse_one(key, value)?,
            "anomalies_per_subject" => self.anomalies_per_subject = parse_one(key, value)?,
            "threads" => self.threads = parse_one(key, value)?,
            "verbose" => self.verbose = parse_one(key, value)?,
            other => return Err(HarnessError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), HarnessError> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_pairs(&parse_pairs(&text)?)?;
        Ok(cfg)
    }

    /// Renders the configuration in the file format [`parse_pairs`] reads.
    pub fn to_pairs_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                let rendered = match v {
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                out.push_str(&format!("{k}={rendered}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |m: String| Err(HarnessError::Config(m));
        let trainable = self.pool_subjects.saturating_sub(self.held_out);
        if self.held_out < 2 {
            return fail("held_out must be at least 2 for bootstrap intervals".into());
        }
        if self.val_subjects == 0 {
            return fail("val_subjects must be positive".into());
        }
        if self.sizes.is_empty() || self.levels.is_empty() {
            return fail("sizes and levels must be non-empty".into());
        }
        for &s in self
            .sizes
            .iter()
            .chain([&self.noise_model_size, &self.anomaly_model_size])
        {
            if s == 0 || s > trainable {
                return fail(format!("training size {s} outside 1..={trainable}"));
            }
        }
        if self.levels.iter().any(|l| !(*l >= 0.0)) {
            return fail("noise levels must be non-negative".into());
        }
        if self.anomalies_per_subject == 0 {
            return fail("anomalies_per_subject must be positive".into());
        }
        if self.mc_samples < 2 {
            return fail("mc_samples must be at least 2".into());
        }
        if self.bootstrap_resamples < MIN_RESAMPLES {
            return fail(format!(
                "bootstrap_resamples must be at least {MIN_RESAMPLES}"
            ));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return fail(format!("ci_level {} outside (0, 1)", self.ci_level));
        }
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if self.patch_size > self.image_size || !self.patch_size.is_multiple_of(1 << self.depth) {
            return fail(format!(
                "patch size {} must fit the image and be divisible by 2^{}",
                self.patch_size, self.depth
            ));
        }
        self.unet().validate()?;
        self.phantom().validate(self.depth)?;
        self.hyper().validate()?;
        self.train_config(0).validate()?;
        Ok(())
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            base_channels: self.base_channels,
            depth: self.depth,
            dropout_rate: self.dropout,
            image_size: self.image_size,
            ..UNetConfig::default()
        }
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            size: self.image_size,
            subjects: self.pool_subjects,
            sigma_background: self.sigma_background,
            sigma_body: self.sigma_body,
            seed: self.seed,
        }
    }

    pub fn hyper(&self) -> OptimHyper {
        OptimHyper {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            batch_size: self.batch_size,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            plateau_patience: self.patience,
            plateau_min_delta: self.min_delta,
            min_epoch_samples: self.epoch_patches,
            seed,
            verbose: self.verbose,
            ..TrainConfig::default()
        }
    }

    pub fn mc(&self, seed: u64) -> MCConfig {
        MCConfig {
            samples: self.mc_samples,
            seed,
            chunk: self.mc_chunk,
        }
    }
}

/// Output directory: explicit flag, else `$UQSYNTH_OUT`, else `uqsynth-out`.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("uqsynth-out"))
}
