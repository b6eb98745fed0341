use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IdacError, Result};

/// One row per evaluation. Loss and entropy columns average the updates made
/// since the previous row and are empty when none were made.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    /// Mean undiscounted return of training episodes finished in the interval.
    pub train_return_mean: Option<f64>,
    pub critic1_loss: Option<f64>,
    /// Empty in single-critic runs.
    pub critic2_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha: f64,
    /// `−log π̂` of fresh actions: an estimate of policy entropy.
    pub entropy: Option<f64>,
    /// `W₁` between sorted online samples and their Bellman targets.
    pub wasserstein: Option<f64>,
    pub updates: u64,
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "eval_return_mean",
    "eval_return_std",
    "train_return_mean",
    "critic1_loss",
    "critic2_loss",
    "actor_loss",
    "alpha",
    "entropy",
    "wasserstein",
    "updates",
];

pub const TIMING_HEADER: [&str; 3] = ["step", "elapsed_secs", "steps_per_sec"];

fn csv_err(e: csv::Error) -> IdacError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IdacError::Io(io),
        other => IdacError::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Append-only CSV writer that always emits its header, even with no rows.
pub struct CsvLog {
    writer: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(csv_err)?;
        writer.write_record(header).map_err(csv_err)?;
        writer.flush()?;
        Ok(CsvLog { writer })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn append_record<I, S>(&mut self, record: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(record).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Writes a whole table at once.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut log = CsvLog::create(path, header)?;
    for row in rows {
        log.append(row)?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

/// Running mean over an evaluation interval.
#[derive(Clone, Debug, Default)]
pub(crate) struct Mean {
    sum: f64,
    n: u64,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    pub fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

/// Small helper for plain-text side files.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
