//! Per-step CSV records.
//!
//! `metrics.csv` holds only values that are a pure function of
//! `(config, seed)`, so two identical runs produce byte-identical files;
//! wall-clock times go to a separate `timing.csv`.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row per update step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean base (rule) reward over all rollouts of the step.
    pub mean_reward: f64,
    /// Mean over groups of the best base reward in the group.
    pub max_reward: f64,
    /// Mean combined reward, entropy bonus included.
    pub mean_combined: f64,
    pub mean_adv: f64,
    /// Mean `|A~|` over all tokens.
    pub mean_abs_weighted_adv: f64,
    /// Mean sequence entropy of the sampling snapshot along its rollouts.
    pub entropy: f64,
    /// Mean sequence entropy of the reference along the same rollouts.
    pub ref_entropy: f64,
    /// Mean per-token exact KL to the reference.
    pub kl: f64,
    pub clip_frac: f64,
    pub skipped_groups: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub reward_counting: Option<f64>,
    pub reward_position: Option<f64>,
    pub reward_region: Option<f64>,
    pub reward_text: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,mean_reward,max_reward,mean_combined,mean_adv,mean_abs_weighted_adv,entropy,ref_entropy,kl,clip_frac,skipped_groups,loss,grad_norm,reward_counting,reward_position,reward_region,reward_text";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub seconds: f64,
}

/// Held-out evaluation at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub task: String,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub mean_entropy: f64,
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// Append-only CSV writer that flushes after every row.
pub struct CsvLog {
    inner: csv::Writer<File>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            inner: csv::Writer::from_writer(File::create(path)?),
        })
    }

    pub fn append<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::Format(format!("{}: unexpected metrics header", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
