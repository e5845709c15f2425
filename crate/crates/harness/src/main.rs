use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use uqsynth_core::nn::UNet;
use uqsynth_core::synth;
use uqsynth_harness::config::{resolve_out_dir, HarnessConfig, OUT_DIR_ENV};
use uqsynth_harness::experiments::{derive_seed, predict_to_dir, Experiment, ModelKind};
use uqsynth_harness::{ExperimentReport, Harness, HarnessError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "uqsynth",
    version,
    about = "Uncertainty experiments on synthetic paired images"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    out_dir: Option<PathBuf>,

    /// Comma-separated experiments run by `all`
    #[arg(long, global = true)]
    experiment: Option<String>,

    /// Comma-separated input-noise levels
    #[arg(long, global = true)]
    levels: Option<String>,

    /// Comma-separated training-set sizes
    #[arg(long, global = true)]
    sizes: Option<String>,

    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Extra key=value override; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Progress messages on stderr
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dump the subject pool and validation subjects as PGM + JSON
    GenerateData,
    /// Train one model and save its checkpoint
    Train {
        /// Number of pool subjects to train on
        #[arg(long, default_value_t = 45)]
        subjects: usize,
        /// Train the single-head, dropout-free MSE model
        #[arg(long)]
        baseline: bool,
    },
    /// Write prediction and uncertainty maps for one subject
    Predict {
        /// Checkpoint to load; defaults to the cached model for `--subjects`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 45)]
        subjects: usize,
        /// Pool index of the subject; defaults to the first held-out subject
        #[arg(long)]
        subject: Option<usize>,
        /// Std of Gaussian noise added to the input
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Insert an all-zero square into the input
        #[arg(long)]
        anomaly: bool,
    },
    ExpEpistemic,
    ExpAleatoric,
    ExpAnomaly,
    ExpBaseline,
    /// Run every experiment (or those named by --experiment)
    All,
}

fn build_config(c: &Common) -> Result<HarnessConfig> {
    let mut cfg = match &c.config {
        Some(path) => HarnessConfig::from_file(path)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(levels) = &c.levels {
        cfg.set("levels", levels)?;
    }
    if let Some(sizes) = &c.sizes {
        cfg.set("sizes", sizes)?;
    }
    if let Some(threads) = c.threads {
        cfg.threads = threads;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if c.verbose {
        cfg.verbose = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &ExperimentReport, out_dir: &std::path::Path) {
    println!(
        "{}: {} rows -> {}",
        report.experiment,
        report.rows.len(),
        ExperimentReport::csv_path(out_dir, &report.experiment).display()
    );
    if let Some(winners) = report.details.get("winners").and_then(|w| w.as_object()) {
        for (metric, winner) in winners {
            println!("  {metric}: {}", winner.as_str().unwrap_or("?"));
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.common)?;
    let out_dir = resolve_out_dir(cli.common.out_dir.clone());
    let mut harness = Harness::new(cfg, &out_dir)?;
    match cli.command {
        Command::GenerateData => {
            let n = harness.generate_data()?;
            println!("wrote {n} subjects to {}", out_dir.join("data").display());
        }
        Command::Train { subjects, baseline } => {
            let kind = if baseline {
                ModelKind::Baseline
            } else {
                ModelKind::Proposed
            };
            let path = harness.checkpoint_path(kind, subjects);
            let s = harness.model(kind, subjects)?.summary.clone();
            println!(
                "{} n={}: {} epochs, best epoch {} (val loss {}) -> {}",
                kind.name(),
                subjects,
                s.epochs_run,
                s.best_epoch,
                s.best_val_loss,
                path.display()
            );
        }
        Command::Predict {
            checkpoint,
            subjects,
            subject,
            noise,
            anomaly,
        } => {
            let cfg = harness.config().clone();
            let index = subject.unwrap_or(cfg.pool_subjects - cfg.held_out);
            let mut sample =
                harness.pool().get(index).cloned().ok_or_else(|| {
                    HarnessError::Config(format!("subject {index} outside the pool"))
                })?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(
                derive_seed(cfg.seed, "predict", index as u64),
            );
            if anomaly {
                sample = synth::insert_anomaly(&sample, cfg.anomaly_side, &mut rng)?;
            }
            sample = synth::add_input_noise(&sample, noise, &mut rng)?;
            let net = match checkpoint {
                Some(path) => UNet::load(path)?,
                None => harness.model(ModelKind::Proposed, subjects)?.net.clone(),
            };
            let dir = out_dir.join("predict").join(format!("subject_{index:03}"));
            let written = predict_to_dir(
                &net,
                &sample.x,
                &cfg.mc(derive_seed(cfg.seed, "mc-predict", index as u64)),
                &dir,
            )?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::ExpEpistemic => print_report(&harness.run(Experiment::Epistemic)?, &out_dir),
        Command::ExpAleatoric => print_report(&harness.run(Experiment::Aleatoric)?, &out_dir),
        Command::ExpAnomaly => print_report(&harness.run(Experiment::Anomaly)?, &out_dir),
        Command::ExpBaseline => print_report(&harness.run(Experiment::Baseline)?, &out_dir),
        Command::All => {
            let selected = match &cli.common.experiment {
                Some(list) => list
                    .split(',')
                    .map(|s| Experiment::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()?,
                None => Experiment::ALL.to_vec(),
            };
            for e in selected {
                print_report(&harness.run(e)?, &out_dir);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error kind=usage message=\"{}\"", first.replace('"', "'"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
