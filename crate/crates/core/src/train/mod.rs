//! Losses, the AdamW optimiser and the plateau-stopping training loop.

mod adamw;
mod loss;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adamw::{AdamWState, OptimHyper};
pub use loss::{hetero_loss, mse_loss};

use crate::error::{Error, Result};
use crate::nn::{DropoutStreams, Network, ParamStore};
use crate::synth::PairedSample;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hetero,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Share of the training pairs held out when no validation set is given.
    pub validation_fraction: f64,
    /// An epoch repeats reshuffled passes over the training pairs until it
    /// has seen at least this many. 0 means a single pass.
    pub min_epoch_samples: usize,
    pub seed: u64,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            validation_fraction: 0.1,
            min_epoch_samples: 0,
            seed: 0,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.plateau_patience == 0 || self.max_epochs == 0 {
            return Err(Error::Domain(
                "patience and max_epochs must be at least 1".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Domain(format!(
                "validation fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// One input/target pair as `[1, C, H, W]` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub x: Tensor,
    pub y: Tensor,
}

impl From<&PairedSample> for TrainPair {
    fn from(s: &PairedSample) -> Self {
        Self {
            x: s.x.to_tensor(),
            y: s.y.to_tensor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,learning_rate,wall_seconds\n");
        for r in &self.history {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.epoch, r.train_loss, r.val_loss, r.learning_rate, r.wall_seconds
            );
        }
        out
    }
}

fn stack(pairs: &[&TrainPair]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<&Tensor> = pairs.iter().map(|p| &p.x).collect();
    let ys: Vec<&Tensor> = pairs.iter().map(|p| &p.y).collect();
    Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
}

/// Records the loss of `kind` for already computed heads.
pub fn record_loss(
    tape: &mut Tape,
    kind: LossKind,
    y: Var,
    mean: Var,
    log_var: Option<Var>,
) -> Result<Var> {
    match (kind, log_var) {
        (LossKind::Hetero, Some(s)) => hetero_loss(tape, y, mean, s),
        (LossKind::Hetero, None) => Err(Error::Contract(
            "heteroscedastic loss needs a two-headed model".into(),
        )),
        (LossKind::Mse, _) => mse_loss(tape, y, mean),
    }
}

/// Mean per-pixel loss over `pairs` with dropout inactive.
pub fn evaluate_loss<N: Network>(
    model: &N,
    pairs: &[TrainPair],
    kind: LossKind,
    batch: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("empty evaluation set".into()));
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for chunk in pairs.chunks(batch.max(1)) {
        let refs: Vec<&TrainPair> = chunk.iter().collect();
        let (xb, yb) = stack(&refs)?;
        let pixels = yb.len() as f64;
        let mut tape = Tape::new();
        let (_, heads) = model.run(&mut tape, xb, None, false)?;
        let y = tape.constant(yb);
        let loss = record_loss(&mut tape, kind, y, heads.mean, heads.log_var)?;
        total += tape.value(loss).item() * pixels;
        count += pixels;
    }
    Ok(total / count)
}

/// Gradients of the batch loss with respect to every parameter, plus the loss.
pub fn batch_gradients<N: Network>(
    model: &N,
    batch: &[&TrainPair],
    kind: LossKind,
    dropout: Option<&mut DropoutStreams>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let (xb, yb) = stack(batch)?;
    let mut tape = Tape::new();
    let (params, heads) = model.run(&mut tape, xb, dropout, true)?;
    let y = tape.constant(yb);
    let loss = record_loss(&mut tape, kind, y, heads.mean, heads.log_var)?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(model.params().iter())
        .map(|(&v, p)| {
            tape.take_grad(v)
                .unwrap_or_else(|| vec![0.0; p.value.len()])
        })
        .collect();
    Ok((value, grads))
}

/// Trains `model` in place and leaves it holding the weights of the epoch
/// with the lowest validation loss.
///
/// Each epoch reshuffles the training pairs with the seeded generator and
/// runs mini-batch AdamW steps with dropout active. Training stops once the
/// validation loss (dropout inactive) has failed to improve on its reference
/// by `plateau_min_delta` for `plateau_patience` consecutive epochs, or at
/// `max_epochs`.
pub fn train<N: Network>(
    model: &mut N,
    train_set: &[TrainPair],
    val_set: Option<&[TrainPair]>,
    cfg: &TrainConfig,
    hyper: &OptimHyper,
    kind: LossKind,
) -> Result<TrainReport> {
    cfg.validate()?;
    hyper.validate()?;
    if kind == LossKind::Hetero && !model.two_heads() {
        return Err(Error::Contract(
            "heteroscedastic loss needs a two-headed model".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (train_pairs, val_pairs): (Vec<&TrainPair>, Vec<TrainPair>) = match val_set {
        Some(v) => (train_set.iter().collect(), v.to_vec()),
        None => {
            let mut idx: Vec<usize> = (0..train_set.len()).collect();
            idx.shuffle(&mut rng);
            let n_val =
                ((train_set.len() as f64 * cfg.validation_fraction).round() as usize).max(1);
            if n_val >= train_set.len() {
                return Err(Error::Domain(format!(
                    "{} pairs are too few to split off a validation set",
                    train_set.len()
                )));
            }
            let val = idx[..n_val].iter().map(|&i| train_set[i].clone()).collect();
            let tr = idx[n_val..].iter().map(|&i| &train_set[i]).collect();
            (tr, val)
        }
    };
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Domain(
            "training and validation sets must be non-empty".into(),
        ));
    }

    let start = Instant::now();
    let mut state = AdamWState::new(model.params());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params: Option<ParamStore> = None;
    let mut plateau_ref = f64::INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let passes = cfg.min_epoch_samples.div_ceil(train_pairs.len()).max(1);

    for epoch in 1..=cfg.max_epochs {
        let diverged = |message: String| Error::Training { epoch, message };
        let mut sum = 0.0;
        for _ in 0..passes {
            order.shuffle(&mut rng);
            for chunk in order.chunks(hyper.batch_size) {
                let batch: Vec<&TrainPair> = chunk.iter().map(|&i| train_pairs[i]).collect();
                let mut streams = DropoutStreams::per_item(rng.next_u64(), 0, batch.len());
                let (loss, grads) = batch_gradients(model, &batch, kind, Some(&mut streams))
                    .map_err(|e| diverged(e.to_string()))?;
                if !loss.is_finite() {
                    return Err(diverged(format!("training loss {loss}")));
                }
                state.step(model.params_mut(), &grads, hyper)?;
                sum += loss * batch.len() as f64;
            }
        }
        let train_loss = sum / (passes * train_pairs.len()) as f64;
        let val_loss = evaluate_loss(model, &val_pairs, kind, hyper.batch_size)
            .map_err(|e| diverged(e.to_string()))?;
        if !val_loss.is_finite() {
            return Err(diverged(format!("validation loss {val_loss}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: hyper.learning_rate,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if cfg.verbose {
            eprintln!(
                "epoch {epoch:>4}  train {train_loss:>12.6}  val {val_loss:>12.6}  {:>8.1}s",
                record.wall_seconds
            );
        }
        history.push(record);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(model.params().clone());
        }
        if val_loss < plateau_ref - cfg.plateau_min_delta {
            plateau_ref = val_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}
