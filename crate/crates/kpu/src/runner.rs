//! The training command: metrics, periodic and final checkpoints, resume.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kpu_core::data::{generate_batch, stream_id};
use kpu_core::trainer::{TrainConfig, Trainer};
use kpu_core::Tensor;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{KpuError, Result};
use crate::metrics::MetricsWriter;

pub const FINAL_CHECKPOINT: &str = "final.kpuc";
pub const CONFIG_FILE: &str = "config.json";

/// Fixed evaluation images, disjoint from every teacher's training stream.
pub fn eval_images(cfg: &TrainConfig, n: usize) -> Result<Vec<Tensor<f32>>> {
    Ok(generate_batch(&cfg.data, stream_id("eval"), 0, n.max(1))?)
}

pub fn step_checkpoint(step: u64) -> String {
    format!("step_{step}.kpuc")
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are complete, even if the run is not
    /// finished; a checkpoint is written so the run can be resumed.
    pub stop_after: Option<u64>,
    pub verbose: bool,
}

/// Runs (or continues) training into `out`. Returns the trainer at the
/// point where it stopped.
pub fn train(exp: &ExperimentConfig, out: &Path, opts: &TrainOptions) -> Result<Trainer<f32>> {
    std::fs::create_dir_all(out).map_err(KpuError::io(out))?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let t = checkpoint::load(path)?;
            if t.config != exp.train {
                return Err(KpuError::Config(format!("{} was written with a different training config", path.display())));
            }
            t
        }
        None => {
            let path = out.join(CONFIG_FILE);
            let text = serde_json::to_string_pretty(&exp.to_value()).expect("config serializes");
            std::fs::write(&path, text + "\n").map_err(KpuError::io(&path))?;
            Trainer::<f32>::new(exp.train.clone())?
        }
    };
    let run = &exp.run;
    let eval = eval_images(&trainer.config, run.eval_images)?;
    let mut writer = MetricsWriter::create(out, run.metrics_flush_every, opts.resume.is_some())?;
    let limit = opts.stop_after.unwrap_or(u64::MAX);
    while !trainer.finished() && trainer.step < limit {
        let start = Instant::now();
        let mut record = trainer.train_step()?;
        let step = record.step;
        let snapshot = step == 0 || trainer.finished() || (run.alignment_every > 0 && (step + 1) % run.alignment_every == 0);
        if snapshot {
            record.alignment = Some(trainer.alignment(&eval)?);
        }
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        writer.write(&record, wall_ms)?;
        if opts.verbose && snapshot {
            eprintln!("step {:>5}  lr {:.3e}  L_KPU {:.4}  alignment {:?}", step + 1, record.lr, record.losses.totals.kpu, record.alignment.as_ref().unwrap());
        }
        if run.checkpoint_every > 0 && trainer.step % run.checkpoint_every == 0 && !trainer.finished() {
            checkpoint::save(&trainer, &out.join(step_checkpoint(trainer.step)))?;
        }
    }
    writer.flush()?;
    if trainer.finished() {
        checkpoint::save(&trainer, &out.join(FINAL_CHECKPOINT))?;
    } else {
        checkpoint::save(&trainer, &out.join(step_checkpoint(trainer.step)))?;
    }
    Ok(trainer)
}
