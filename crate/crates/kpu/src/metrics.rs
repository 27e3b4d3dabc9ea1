//! Metrics streams. `metrics.jsonl` holds one deterministic record per
//! step; wall-clock timings go to a separate `timing.jsonl` so that the
//! metrics stream stays byte-comparable across runs.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use kpu_core::trainer::MetricsRecord;
use serde::{Deserialize, Serialize};

use crate::error::{KpuError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub step: u64,
    pub wall_ms: f64,
}

pub struct MetricsWriter {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
    flush_every: u64,
    pending: u64,
    dir: std::path::PathBuf,
}

fn open(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path).map_err(KpuError::io(path))?;
    Ok(BufWriter::new(f))
}

impl MetricsWriter {
    /// `append` continues existing streams (used when resuming).
    pub fn create(dir: &Path, flush_every: u64, append: bool) -> Result<Self> {
        Ok(Self {
            metrics: open(&dir.join(METRICS_FILE), append)?,
            timing: open(&dir.join(TIMING_FILE), append)?,
            flush_every: flush_every.max(1),
            pending: 0,
            dir: dir.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord, wall_ms: f64) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        let timing = serde_json::to_string(&Timing { step: record.step, wall_ms }).expect("timing serializes");
        let dir = self.dir.clone();
        writeln!(self.metrics, "{line}").map_err(KpuError::io(dir.join(METRICS_FILE)))?;
        writeln!(self.timing, "{timing}").map_err(KpuError::io(dir.join(TIMING_FILE)))?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.pending = 0;
        self.metrics.flush().map_err(KpuError::io(self.dir.join(METRICS_FILE)))?;
        self.timing.flush().map_err(KpuError::io(self.dir.join(TIMING_FILE)))
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Parses a metrics stream back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(KpuError::io(path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| KpuError::Config(format!("{}: {e}", path.display()))))
        .collect()
}
