use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::losses::{LossBreakdown, TrainStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub stage: TrainStage,
    pub seed: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Seconds since the stage started.
    pub wall_clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIters,
    Converged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: TrainStage,
    pub seed: u64,
    pub records: Vec<TrainRecord>,
    pub stop: StopReason,
}

impl TrainLog {
    /// Mean total loss over the first and the last `window` records.
    pub fn window_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |r: &[TrainRecord]| r.iter().map(|r| r.loss.total).sum::<f64>() / r.len() as f64;
        Some((mean(&self.records[..w]), mean(&self.records[n - w..])))
    }

    /// One JSON object per iteration.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<TrainRecord>> {
        let mut out: Vec<TrainRecord> = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: TrainRecord = serde_json::from_str(&line)?;
            if let Some(prev) = out.last() {
                if r.iteration <= prev.iteration || r.stage != prev.stage {
                    return param(format!("log record {} out of order", r.iteration));
                }
            }
            out.push(r);
        }
        Ok(out)
    }
}
