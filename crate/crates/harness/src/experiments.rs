//! The four experiments and the shared state they draw on: the subject
//! pool, the validation subjects and a cache of trained models.
//!
//! Subject roles are fixed by pool index. The last `held_out` pool
//! subjects are the test set; a training size `n` uses pool subjects
//! `0..n`. Early stopping watches a separate set of validation subjects
//! whose seeds continue the pool's seed sequence, so they never coincide
//! with pool subjects.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uqsynth_core::image::{Image, Mask};
use uqsynth_core::metrics::{bootstrap_ci, image_metrics, masked_mean, ImageMetrics};
use uqsynth_core::nn::{checkpoint, Network, UNet, UNetConfig};
use uqsynth_core::pgm;
use uqsynth_core::synth::{self, splitmix, PairedSample};
use uqsynth_core::tape::Tape;
use uqsynth_core::train::{self, LossKind, TrainConfig, TrainPair};
use uqsynth_core::uncertainty::{predict_with_uncertainty, UncertaintyMaps};

use crate::config::HarnessConfig;
use crate::report::{ExperimentReport, Row};
use crate::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Two heads, spatial dropout, heteroscedastic loss.
    Proposed,
    /// One head, no dropout, MSE loss.
    Baseline,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Proposed => "proposed",
            ModelKind::Baseline => "baseline",
        }
    }

    fn loss(self) -> LossKind {
        match self {
            ModelKind::Proposed => LossKind::Hetero,
            ModelKind::Baseline => LossKind::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Experiment {
    Epistemic,
    Aleatoric,
    Anomaly,
    Baseline,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::Epistemic,
        Experiment::Aleatoric,
        Experiment::Anomaly,
        Experiment::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Epistemic => "epistemic",
            Experiment::Aleatoric => "aleatoric",
            Experiment::Anomaly => "anomaly",
            Experiment::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub kind: ModelKind,
    pub subjects: usize,
    pub patches: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub parameters: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: UNet,
    pub summary: TrainingSummary,
}

/// Everything that influences the weights of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Fingerprint {
    kind: ModelKind,
    subjects: usize,
    unet: UNetConfig,
    seed: u64,
    pool_subjects: usize,
    val_subjects: usize,
    sigma_background: f64,
    sigma_body: f64,
    patch_size: usize,
    patch_stride: usize,
    train: serde_json::Value,
    hyper: serde_json::Value,
}

/// Mean σ̂ (square root of the aleatoric map) on clean held-out inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaRecovery {
    pub body: f64,
    pub outside: f64,
    pub subjects: usize,
}

/// Independent stream seed for a named purpose and index.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let tag = purpose
        .bytes()
        .fold(0xC0FF_EE00_u64, |h, b| splitmix(h ^ u64::from(b)));
    splitmix(splitmix(seed ^ tag).wrapping_add(index))
}

pub struct Harness {
    cfg: HarnessConfig,
    out_dir: PathBuf,
    pool: Vec<PairedSample>,
    validation: Vec<PairedSample>,
    models: BTreeMap<(ModelKind, usize), TrainedModel>,
    threads: rayon::ThreadPool,
}

impl Harness {
    pub fn new(cfg: HarnessConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let phantom = cfg.phantom();
        let total = cfg.pool_subjects + cfg.val_subjects;
        let seeds: Vec<u64> = (0..total as u64).map(|i| phantom.subject_seed(i)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != total {
            return Err(HarnessError::Config(
                "subject seeds collide; choose another seed".into(),
            ));
        }
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        let mut subjects: Vec<PairedSample> = threads.install(|| {
            seeds
                .par_iter()
                .map(|&s| synth::generate_pair(s, &phantom))
                .collect()
        });
        let validation = subjects.split_off(cfg.pool_subjects);
        Ok(Self {
            cfg,
            out_dir: out_dir.into(),
            pool: subjects,
            validation,
            models: BTreeMap::new(),
            threads,
        })
    }

    pub fn config(&self) -> &HarnessConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn pool(&self) -> &[PairedSample] {
        &self.pool
    }

    pub fn validation_subjects(&self) -> &[PairedSample] {
        &self.validation
    }

    pub fn test_subjects(&self) -> &[PairedSample] {
        &self.pool[self.cfg.pool_subjects - self.cfg.held_out..]
    }

    pub fn training_subjects(&self, n: usize) -> &[PairedSample] {
        &self.pool[..n]
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.cfg.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn maps_dir(&self, experiment: &str) -> Result<PathBuf> {
        let dir = self.out_dir.join("maps").join(experiment);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn write_map(
        &self,
        experiment: &str,
        name: &str,
        img: &Image,
        maps: &mut Vec<String>,
    ) -> Result<()> {
        pgm::write_scaled_with_sidecar(self.maps_dir(experiment)?, name, img)?;
        maps.push(format!("maps/{experiment}/{name}.pgm"));
        Ok(())
    }

    fn fingerprint(&self, kind: ModelKind, subjects: usize) -> Fingerprint {
        let unet = match kind {
            ModelKind::Proposed => self.cfg.unet(),
            ModelKind::Baseline => self.cfg.unet().baseline(),
        };
        Fingerprint {
            kind,
            subjects,
            unet,
            seed: self.cfg.seed,
            pool_subjects: self.cfg.pool_subjects,
            val_subjects: self.cfg.val_subjects,
            sigma_background: self.cfg.sigma_background,
            sigma_body: self.cfg.sigma_body,
            patch_size: self.cfg.patch_size,
            patch_stride: self.cfg.patch_stride,
            train: serde_json::to_value(TrainConfig {
                verbose: false,
                ..self.cfg.train_config(0)
            })
            .expect("serialisable"),
            hyper: serde_json::to_value(self.cfg.hyper()).expect("serialisable"),
        }
    }

    pub fn checkpoint_path(&self, kind: ModelKind, subjects: usize) -> PathBuf {
        self.out_dir
            .join("models")
            .join(format!("{}_n{subjects}.ckpt", kind.name()))
    }

    fn load_cached(&self, kind: ModelKind, subjects: usize) -> Option<TrainedModel> {
        let file = fs::File::open(self.checkpoint_path(kind, subjects)).ok()?;
        let (params, meta) = checkpoint::read_params(std::io::BufReader::new(file)).ok()?;
        let stored: Fingerprint = serde_json::from_value(meta.get("fingerprint")?.clone()).ok()?;
        if stored != self.fingerprint(kind, subjects) {
            return None;
        }
        let summary = serde_json::from_value(meta.get("summary")?.clone()).ok()?;
        let net = UNet::with_params(stored.unet, params).ok()?;
        Some(TrainedModel { net, summary })
    }

    /// Returns the model of `kind` trained on `subjects` pool subjects,
    /// training it (or loading a matching checkpoint) on first use.
    pub fn model(&mut self, kind: ModelKind, subjects: usize) -> Result<&TrainedModel> {
        if !self.models.contains_key(&(kind, subjects)) {
            let model = match self.load_cached(kind, subjects) {
                Some(m) => {
                    self.log(format!(
                        "loaded {} n={subjects} from checkpoint",
                        kind.name()
                    ));
                    m
                }
                None => self.train_model(kind, subjects)?,
            };
            self.models.insert((kind, subjects), model);
        }
        Ok(&self.models[&(kind, subjects)])
    }

    fn train_model(&self, kind: ModelKind, subjects: usize) -> Result<TrainedModel> {
        let condition = format!("{} n={subjects}", kind.name());
        let tag = |e: uqsynth_core::Error| HarnessError::Condition {
            experiment: "train".into(),
            condition: condition.clone(),
            source: e,
        };
        let fp = self.fingerprint(kind, subjects);
        let index = subjects as u64 * 2 + (kind == ModelKind::Baseline) as u64;
        let mut net =
            UNet::new(fp.unet.clone(), derive_seed(self.cfg.seed, "init", index)).map_err(tag)?;

        let mut train_pairs = Vec::new();
        for s in self.training_subjects(subjects) {
            let patches = synth::extract_patches(s, self.cfg.patch_size, self.cfg.patch_stride)
                .map_err(tag)?;
            train_pairs.extend(patches.iter().map(TrainPair::from));
        }
        let val_pairs: Vec<TrainPair> = self.validation.iter().map(TrainPair::from).collect();
        self.log(format!(
            "training {condition}: {} patches, {} parameters",
            train_pairs.len(),
            net.parameter_count()
        ));

        let tcfg = self
            .cfg
            .train_config(derive_seed(self.cfg.seed, "train", index));
        let report = train::train(
            &mut net,
            &train_pairs,
            Some(&val_pairs),
            &tcfg,
            &self.cfg.hyper(),
            kind.loss(),
        )
        .map_err(tag)?;

        let summary = TrainingSummary {
            kind,
            subjects,
            patches: train_pairs.len(),
            epochs_run: report.history.len(),
            best_epoch: report.best_epoch,
            best_val_loss: report.best_val_loss,
            parameters: net.parameter_count(),
        };
        let path = self.checkpoint_path(kind, subjects);
        fs::create_dir_all(path.parent().expect("models dir"))?;
        let meta = json!({ "unet": net.config(), "fingerprint": fp, "summary": summary });
        let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
        checkpoint::write_params(&mut w, net.params(), meta)?;
        std::io::Write::flush(&mut w)?;
        fs::write(
            path.with_file_name(format!("{}_n{subjects}_history.csv", kind.name())),
            report.to_csv(),
        )?;
        self.log(format!(
            "trained {condition}: {} epochs, best {} (val {:.6})",
            summary.epochs_run, summary.best_epoch, summary.best_val_loss
        ));
        Ok(TrainedModel { net, summary })
    }

    fn uncertainty_maps(
        &self,
        net: &UNet,
        inputs: &[(Image, u64)],
    ) -> uqsynth_core::Result<Vec<UncertaintyMaps>> {
        self.threads.install(|| {
            inputs
                .par_iter()
                .map(|(x, seed)| predict_with_uncertainty(net, x, &self.cfg.mc(*seed)))
                .collect()
        })
    }

    fn ci_row(
        &self,
        experiment: &str,
        condition: &str,
        domain: &str,
        statistic: &str,
        values: &[f64],
        row: u64,
    ) -> Result<Row> {
        let ci = bootstrap_ci(
            values,
            self.cfg.bootstrap_resamples,
            self.cfg.ci_level,
            derive_seed(self.cfg.seed, experiment, row),
        )?;
        Ok(Row::from_ci(
            experiment,
            condition,
            domain,
            statistic,
            &ci,
            values.len(),
            self.cfg.seed,
        ))
    }

    fn finish(
        &self,
        experiment: Experiment,
        rows: Vec<Row>,
        maps: Vec<String>,
        details: serde_json::Value,
        start: Instant,
    ) -> Result<ExperimentReport> {
        let report = ExperimentReport {
            experiment: experiment.name().into(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            rows,
            maps,
            details,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        report.write(&self.out_dir)?;
        Ok(report)
    }

    pub fn run(&mut self, experiment: Experiment) -> Result<ExperimentReport> {
        match experiment {
            Experiment::Epistemic => self.epistemic_vs_size(),
            Experiment::Aleatoric => self.aleatoric_vs_noise(),
            Experiment::Anomaly => self.anomaly(),
            Experiment::Baseline => self.baseline_compare(),
        }
    }

    pub fn all(&mut self) -> Result<Vec<ExperimentReport>> {
        Experiment::ALL.into_iter().map(|e| self.run(e)).collect()
    }

    /// Mean held-out epistemic variance for each training size.
    pub fn epistemic_vs_size(&mut self) -> Result<ExperimentReport> {
        let start = Instant::now();
        let exp = Experiment::Epistemic.name();
        let sizes = self.cfg.sizes.clone();
        let mut rows = Vec::new();
        let mut maps = Vec::new();
        let mut models = Vec::new();
        for &n in &sizes {
            let condition = format!("n={n}");
            let model = self.model(ModelKind::Proposed, n)?.clone();
            let inputs: Vec<(Image, u64)> = self
                .test_subjects()
                .iter()
                .enumerate()
                .map(|(j, s)| (s.x.clone(), derive_seed(self.cfg.seed, "mc-test", j as u64)))
                .collect();
            let results = self.uncertainty_maps(&model.net, &inputs).map_err(|e| {
                HarnessError::Condition {
                    experiment: exp.into(),
                    condition: condition.clone(),
                    source: e,
                }
            })?;
            let mut body = Vec::new();
            let mut image = Vec::new();
            for (m, s) in results.iter().zip(self.test_subjects()) {
                body.push(masked_mean(&m.epistemic, &s.body_mask)?);
                image.push(masked_mean(
                    &m.epistemic,
                    &Mask::filled(s.width(), s.height(), true),
                )?);
            }
            let base = rows.len() as u64;
            rows.push(self.ci_row(exp, &condition, "body", "mean_epistemic", &body, base)?);
            rows.push(self.ci_row(exp, &condition, "image", "mean_epistemic", &image, base + 1)?);
            self.write_map(
                exp,
                &format!("epistemic_n{n}"),
                &results[0].epistemic,
                &mut maps,
            )?;
            models.push(model.summary);
        }
        self.finish(
            Experiment::Epistemic,
            rows,
            maps,
            json!({ "models": models }),
            start,
        )
    }

    /// Mean held-out aleatoric variance for each input-noise level.
    pub fn aleatoric_vs_noise(&mut self) -> Result<ExperimentReport> {
        let start = Instant::now();
        let exp = Experiment::Aleatoric.name();
        let n = self.cfg.noise_model_size;
        let model = self.model(ModelKind::Proposed, n)?.clone();
        let levels = self.cfg.levels.clone();
        let map_levels = [0, levels.len() / 2, levels.len() - 1];
        let mut rows = Vec::new();
        let mut maps = Vec::new();
        for (li, &sigma) in levels.iter().enumerate() {
            let condition = format!("sigma={sigma}");
            let tag = |e: uqsynth_core::Error| HarnessError::Condition {
                experiment: exp.into(),
                condition: condition.clone(),
                source: e,
            };
            // The same standard-normal field per subject at every level.
            let mut inputs = Vec::new();
            for (j, s) in self.test_subjects().iter().enumerate() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "input-noise", j as u64));
                let noisy = synth::add_input_noise(s, sigma, &mut rng).map_err(tag)?;
                inputs.push((noisy.x, derive_seed(self.cfg.seed, "mc-test", j as u64)));
            }
            let results = self.uncertainty_maps(&model.net, &inputs).map_err(tag)?;
            let mut body = Vec::new();
            let mut image = Vec::new();
            for (m, s) in results.iter().zip(self.test_subjects()) {
                body.push(masked_mean(&m.aleatoric, &s.body_mask)?);
                image.push(masked_mean(
                    &m.aleatoric,
                    &Mask::filled(s.width(), s.height(), true),
                )?);
            }
            let base = 2 * li as u64;
            rows.push(self.ci_row(exp, &condition, "body", "mean_aleatoric", &body, base)?);
            rows.push(self.ci_row(exp, &condition, "image", "mean_aleatoric", &image, base + 1)?);
            if map_levels.contains(&li) {
                self.write_map(
                    exp,
                    &format!("aleatoric_level{}", li + 1),
                    &results[0].aleatoric,
                    &mut maps,
                )?;
            }
        }
        let recovery = self.sigma_recovery(n)?;
        let details = json!({ "model": model.summary, "clean_sigma_hat": recovery });
        self.finish(Experiment::Aleatoric, rows, maps, details, start)
    }

    /// Region means of the predicted noise std σ̂ on the clean held-out inputs.
    pub fn sigma_recovery(&mut self, subjects: usize) -> Result<SigmaRecovery> {
        let model = self.model(ModelKind::Proposed, subjects)?.clone();
        let inputs: Vec<(Image, u64)> = self
            .test_subjects()
            .iter()
            .enumerate()
            .map(|(j, s)| (s.x.clone(), derive_seed(self.cfg.seed, "mc-test", j as u64)))
            .collect();
        let results = self.uncertainty_maps(&model.net, &inputs)?;
        let (mut body, mut outside) = (0.0, 0.0);
        for (m, s) in results.iter().zip(self.test_subjects()) {
            let sigma = m.aleatoric.map(f64::sqrt);
            body += masked_mean(&sigma, &s.body_mask)?;
            outside += masked_mean(&sigma, &s.body_mask.complement())?;
        }
        let k = results.len() as f64;
        Ok(SigmaRecovery {
            body: body / k,
            outside: outside / k,
            subjects: results.len(),
        })
    }

    /// Anomalous copies of the held-out subjects, `anomalies_per_subject`
    /// each, at distinct positions within a subject.
    pub fn anomalous_samples(&self) -> Result<Vec<PairedSample>> {
        let per = self.cfg.anomalies_per_subject;
        let mut out = Vec::new();
        for (j, s) in self.test_subjects().iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "anomaly", j as u64));
            let mut used: Vec<Mask> = Vec::new();
            let mut attempts = 0;
            while used.len() < per {
                attempts += 1;
                if attempts > 1000 * per {
                    return Err(HarnessError::Config(format!(
                        "could not place {per} distinct anomalies of side {}",
                        self.cfg.anomaly_side
                    )));
                }
                let a = synth::insert_anomaly(s, self.cfg.anomaly_side, &mut rng)?;
                let mask = a.anomaly_mask.clone().expect("anomaly mask present");
                if !used.contains(&mask) {
                    used.push(mask);
                    out.push(a);
                }
            }
        }
        Ok(out)
    }

    /// Epistemic variance inside inserted anomalies against the rest of
    /// the body and the rest of the image.
    pub fn anomaly(&mut self) -> Result<ExperimentReport> {
        let start = Instant::now();
        let exp = Experiment::Anomaly.name();
        let n = self.cfg.anomaly_model_size;
        let model = self.model(ModelKind::Proposed, n)?.clone();
        let samples = self.anomalous_samples()?;
        let inputs: Vec<(Image, u64)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (
                    s.x.clone(),
                    derive_seed(self.cfg.seed, "mc-anomaly", i as u64),
                )
            })
            .collect();
        let results =
            self.uncertainty_maps(&model.net, &inputs)
                .map_err(|e| HarnessError::Condition {
                    experiment: exp.into(),
                    condition: format!("n={n}"),
                    source: e,
                })?;
        let mut inside = Vec::new();
        let mut outside_body = Vec::new();
        let mut outside_image = Vec::new();
        for (m, s) in results.iter().zip(&samples) {
            let a = s.anomaly_mask.as_ref().expect("anomaly mask present");
            inside.push(masked_mean(&m.epistemic, &a.and(&s.body_mask))?);
            outside_body.push(masked_mean(&m.epistemic, &s.body_mask.and_not(a))?);
            outside_image.push(masked_mean(&m.epistemic, &a.complement())?);
        }
        let rows = vec![
            self.ci_row(exp, "inside_anomaly", "body", "mean_epistemic", &inside, 0)?,
            self.ci_row(
                exp,
                "outside_anomaly",
                "body",
                "mean_epistemic",
                &outside_body,
                1,
            )?,
            self.ci_row(exp, "inside_anomaly", "image", "mean_epistemic", &inside, 0)?,
            self.ci_row(
                exp,
                "outside_anomaly",
                "image",
                "mean_epistemic",
                &outside_image,
                2,
            )?,
        ];
        let mut maps = Vec::new();
        let (s0, m0) = (&samples[0], &results[0]);
        self.write_map(exp, "input", &s0.x, &mut maps)?;
        self.write_map(exp, "mean", &m0.mean_prediction, &mut maps)?;
        self.write_map(exp, "epistemic", &m0.epistemic, &mut maps)?;
        self.write_map(exp, "aleatoric", &m0.aleatoric, &mut maps)?;
        let labels = pgm::mask_labels(&s0.body_mask, s0.anomaly_mask.as_ref());
        pgm::write_labels(
            self.maps_dir(exp)?.join("masks.pgm"),
            s0.width(),
            s0.height(),
            &labels,
            3,
        )?;
        maps.push(format!("maps/{exp}/masks.pgm"));
        let details = json!({ "model": model.summary, "samples": samples.len() });
        self.finish(Experiment::Anomaly, rows, maps, details, start)
    }

    /// Held-out image metrics of the baseline and of the proposed model's
    /// MC mean prediction, trained on the same subjects.
    pub fn baseline_compare(&mut self) -> Result<ExperimentReport> {
        let start = Instant::now();
        let exp = Experiment::Baseline.name();
        let n = self.cfg.noise_model_size;
        let proposed = self.model(ModelKind::Proposed, n)?.clone();
        let baseline = self.model(ModelKind::Baseline, n)?.clone();
        let tag = |condition: &str| {
            let condition = condition.to_string();
            move |e: uqsynth_core::Error| HarnessError::Condition {
                experiment: exp.into(),
                condition,
                source: e,
            }
        };
        let inputs: Vec<(Image, u64)> = self
            .test_subjects()
            .iter()
            .enumerate()
            .map(|(j, s)| (s.x.clone(), derive_seed(self.cfg.seed, "mc-test", j as u64)))
            .collect();
        let maps_proposed = self
            .uncertainty_maps(&proposed.net, &inputs)
            .map_err(tag("proposed"))?;
        let mut baseline_pred = Vec::new();
        for s in self.test_subjects() {
            baseline_pred
                .push(deterministic_prediction(&baseline.net, &s.x).map_err(tag("baseline"))?);
        }

        let mut rows = Vec::new();
        let mut per_model: BTreeMap<&str, Vec<ImageMetrics>> = BTreeMap::new();
        for (name, preds) in [
            ("baseline", baseline_pred.iter().collect::<Vec<_>>()),
            (
                "proposed",
                maps_proposed.iter().map(|m| &m.mean_prediction).collect(),
            ),
        ] {
            for (j, (pred, s)) in preds.iter().zip(self.test_subjects()).enumerate() {
                let m = image_metrics(&s.y, pred, None)?;
                let domain = format!("subject{j}");
                rows.push(Row::exact(exp, name, &domain, "mse", m.mse, self.cfg.seed));
                rows.push(Row::exact(exp, name, &domain, "mae", m.mae, self.cfg.seed));
                rows.push(Row::exact(
                    exp,
                    name,
                    &domain,
                    "psnr",
                    m.psnr,
                    self.cfg.seed,
                ));
                per_model.entry(name).or_default().push(m);
            }
        }
        let mean = |v: &[ImageMetrics], f: fn(&ImageMetrics) -> f64| {
            v.iter().map(f).sum::<f64>() / v.len() as f64
        };
        let mut winners = BTreeMap::new();
        let mut means = BTreeMap::new();
        for (metric, f, lower_better) in [
            (
                "mse",
                (|m: &ImageMetrics| m.mse) as fn(&ImageMetrics) -> f64,
                true,
            ),
            ("mae", |m: &ImageMetrics| m.mae, true),
            ("psnr", |m: &ImageMetrics| m.psnr, false),
        ] {
            let b = mean(&per_model["baseline"], f);
            let p = mean(&per_model["proposed"], f);
            let winner = match (b.partial_cmp(&p), lower_better) {
                (Some(std::cmp::Ordering::Equal), _) | (None, _) => "tie",
                (Some(std::cmp::Ordering::Less), true)
                | (Some(std::cmp::Ordering::Greater), false) => "baseline",
                _ => "proposed",
            };
            winners.insert(metric, winner);
            means.insert(metric, json!({ "baseline": b, "proposed": p }));
        }

        let s0 = &self.test_subjects()[0];
        let mut maps = Vec::new();
        self.write_map(exp, "input", &s0.x, &mut maps)?;
        self.write_map(exp, "target", &s0.y, &mut maps)?;
        self.write_map(exp, "baseline", &baseline_pred[0], &mut maps)?;
        self.write_map(
            exp,
            "proposed_mean",
            &maps_proposed[0].mean_prediction,
            &mut maps,
        )?;
        self.write_map(exp, "epistemic", &maps_proposed[0].epistemic, &mut maps)?;
        self.write_map(exp, "aleatoric", &maps_proposed[0].aleatoric, &mut maps)?;

        let lv_head = proposed.net.parameter_count() - proposed.net.trunk_and_mean_head_count();
        let details = json!({
            "winners": winners,
            "mean_metrics": means,
            "parameters": {
                "proposed": proposed.net.parameter_count(),
                "baseline": baseline.net.parameter_count(),
                "proposed_without_log_variance_head": proposed.net.trunk_and_mean_head_count(),
                "log_variance_head": lv_head,
            },
            "models": [proposed.summary, baseline.summary],
        });
        self.finish(Experiment::Baseline, rows, maps, details, start)
    }

    /// Dumps every pool and validation subject under `data/`.
    pub fn generate_data(&self) -> Result<usize> {
        let dir = self.out_dir.join("data");
        let phantom = self.cfg.phantom();
        for (i, s) in self.pool.iter().enumerate() {
            synth::dump_sample(dir.join(format!("subject_{i:03}")), s, &phantom)?;
        }
        for (i, s) in self.validation.iter().enumerate() {
            synth::dump_sample(dir.join(format!("validation_{i:03}")), s, &phantom)?;
        }
        Ok(self.pool.len() + self.validation.len())
    }
}

/// Single dropout-free pass returning the mean head.
pub fn deterministic_prediction(net: &UNet, x: &Image) -> uqsynth_core::Result<Image> {
    let mut tape = Tape::new();
    let (_, heads) = net.run(&mut tape, x.to_tensor(), None, false)?;
    Image::from_tensor(tape.value(heads.mean))
}

/// Prediction maps for one input, written as PGMs with sidecars into `dir`.
/// Single-head checkpoints yield only the mean.
pub fn predict_to_dir(
    net: &UNet,
    x: &Image,
    mc: &uqsynth_core::uncertainty::MCConfig,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, img: &Image| -> Result<()> {
        pgm::write_scaled_with_sidecar(dir, name, img)?;
        written.push(dir.join(format!("{name}.pgm")));
        Ok(())
    };
    emit("input", x)?;
    if net.two_heads() && net.dropout_rate() > 0.0 {
        let maps = predict_with_uncertainty(net, x, mc)?;
        emit("mean", &maps.mean_prediction)?;
        emit("epistemic", &maps.epistemic)?;
        emit("aleatoric", &maps.aleatoric)?;
        emit("predictive", &maps.predictive)?;
    } else {
        emit("mean", &deterministic_prediction(net, x)?)?;
    }
    Ok(written)
}
