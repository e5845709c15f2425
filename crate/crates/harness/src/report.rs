use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uqsynth_core::metrics::CIResult;

use crate::config::HarnessConfig;
use crate::Result;

pub const CSV_HEADER: &str = "experiment,condition,domain,statistic,point,ci_lo,ci_hi,n,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub condition: String,
    pub domain: String,
    pub statistic: String,
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub seed: u64,
}

impl Row {
    pub fn from_ci(
        experiment: &str,
        condition: &str,
        domain: &str,
        statistic: &str,
        ci: &CIResult,
        n: usize,
        seed: u64,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            condition: condition.into(),
            domain: domain.into(),
            statistic: statistic.into(),
            point: ci.point_estimate,
            ci_lo: ci.lower,
            ci_hi: ci.upper,
            n,
            seed,
        }
    }

    /// A single measured value, reported with a degenerate interval.
    pub fn exact(
        experiment: &str,
        condition: &str,
        domain: &str,
        statistic: &str,
        value: f64,
        seed: u64,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            condition: condition.into(),
            domain: domain.into(),
            statistic: statistic.into(),
            point: value,
            ci_lo: value,
            ci_hi: value,
            n: 1,
            seed,
        }
    }

    pub fn ci(&self) -> (f64, f64) {
        (self.ci_lo, self.ci_hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub config: HarnessConfig,
    pub rows: Vec<Row>,
    /// Emitted maps, relative to the output directory.
    pub maps: Vec<String>,
    /// Experiment-specific findings (winners, parameter counts, training summaries).
    pub details: serde_json::Value,
    /// Kept out of the manifest so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.experiment,
                r.condition,
                r.domain,
                r.statistic,
                r.point,
                r.ci_lo,
                r.ci_hi,
                r.n,
                r.seed
            );
        }
        out
    }

    pub fn manifest(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn csv_path(out_dir: &Path, experiment: &str) -> PathBuf {
        out_dir.join(format!("{experiment}.csv"))
    }

    pub fn manifest_path(out_dir: &Path, experiment: &str) -> PathBuf {
        out_dir.join(format!("{experiment}.json"))
    }

    /// Writes `<experiment>.csv`, `<experiment>.json` and appends the wall
    /// time to `timings.csv`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(Self::csv_path(out_dir, &self.experiment), self.to_csv())?;
        std::fs::write(
            Self::manifest_path(out_dir, &self.experiment),
            self.manifest()?,
        )?;
        let timings = out_dir.join("timings.csv");
        let mut text = std::fs::read_to_string(&timings)
            .unwrap_or_else(|_| "experiment,wall_seconds\n".into());
        let _ = writeln!(text, "{},{:.3}", self.experiment, self.wall_seconds);
        std::fs::write(timings, text)?;
        Ok(())
    }
}

/// Rows parsed back from a report CSV.
pub fn parse_csv(text: &str) -> std::result::Result<Vec<Row>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("unexpected header".into());
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(format!("expected 9 fields in {line:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
            Ok(Row {
                experiment: f[0].into(),
                condition: f[1].into(),
                domain: f[2].into(),
                statistic: f[3].into(),
                point: num(f[4])?,
                ci_lo: num(f[5])?,
                ci_hi: num(f[6])?,
                n: f[7].parse().map_err(|e| format!("{e}"))?,
                seed: f[8].parse().map_err(|e| format!("{e}"))?,
            })
        })
        .collect()
}
