//! The ablation command: ten rows sharing one seed, each trained into its
//! own directory, then summarized.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kpu_core::ablation::{ablation_rows, fit_rec_probe, reconstruction_error, AblationRow};
use kpu_core::hash::fnv1a;
use kpu_core::objective::LossBreakdown;
use kpu_core::trainer::Trainer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyze::analyze;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{KpuError, Result};
use crate::runner::{eval_images, train, TrainOptions};

pub const SUMMARY_FILE: &str = "ablation_summary.json";
pub const TABLE_FILE: &str = "ablation_table.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPair {
    pub native: f64,
    pub unified: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOutcome {
    pub steps: u64,
    pub final_losses: LossBreakdown,
    pub alignment: BTreeMap<String, f64>,
    pub gaps: Option<GapPair>,
    pub backbone_changed: bool,
    /// FNV-1a of the final checkpoint bytes, hex.
    pub run_hash: String,
    /// Reconstruction error on the evaluation images. Rows that never
    /// trained their reconstruction heads report it through a probe fitted
    /// afterwards with the same step budget.
    pub rec_error: BTreeMap<String, f64>,
    pub rec_via_probe: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    #[serde(flatten)]
    pub row: AblationRow,
    pub completed: bool,
    pub error: Option<String>,
    pub outcome: Option<RowOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecComparison {
    pub kpu: f64,
    pub base_c_probe: f64,
    pub kpu_lower: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seed: u64,
    pub steps: u64,
    pub rows: Vec<RowResult>,
    pub rec_comparison: Option<RecComparison>,
}

impl AblationSummary {
    pub fn failed(&self) -> Vec<&str> {
        self.rows.iter().filter(|r| !r.completed).map(|r| r.row.id.as_str()).collect()
    }
}

fn run_row(exp: &ExperimentConfig, row: &AblationRow, dir: &Path) -> Result<RowOutcome> {
    let trainer = train(exp, dir, &TrainOptions::default())?;
    let start = Trainer::<f32>::new(exp.train.clone())?;
    let eval = eval_images(&trainer.config, exp.run.eval_images)?;
    let alignment = trainer.alignment(&eval)?;
    let gaps = if trainer.teachers.iter().filter(|t| !t.spec.is_sentinel).count() >= 2 {
        let r = analyze(&trainer, exp.run.analyze_images)?;
        Some(GapPair { native: r.native.gap.ratio, unified: r.unified.gap.ratio })
    } else {
        None
    };
    let (rec_error, rec_via_probe) = if row.flags.reconstruction_on {
        (reconstruction_error(&trainer, &trainer.store, &eval)?, false)
    } else {
        let probe = fit_rec_probe(&trainer, trainer.config.steps)?;
        (reconstruction_error(&trainer, &probe, &eval)?, true)
    };
    let last = crate::metrics::read_metrics(&dir.join(crate::metrics::METRICS_FILE))?
        .pop()
        .ok_or_else(|| KpuError::Ablation(format!("{}: empty metrics stream", row.id)))?;
    Ok(RowOutcome {
        steps: trainer.step,
        final_losses: last.losses,
        alignment,
        gaps,
        backbone_changed: trainer.backbone_fingerprint() != start.backbone_fingerprint(),
        run_hash: format!("{:016x}", fnv1a(&Checkpoint::capture(&trainer).encode())),
        rec_error,
        rec_via_probe,
    })
}

/// Runs every row under `out/rows/<id>` and writes the summary files.
pub fn run_ablation(exp: &ExperimentConfig, out: &Path) -> Result<AblationSummary> {
    let mut base = exp.train.clone();
    if let Some(s) = exp.run.ablation_steps {
        base.steps = s;
    }
    let rows = ablation_rows(&base)?;
    std::fs::create_dir_all(out).map_err(KpuError::io(out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.run.ablation_jobs.max(1))
        .build()
        .map_err(|e| KpuError::Config(e.to_string()))?;
    let results: Vec<RowResult> = pool.install(|| {
        rows.par_iter()
            .map(|(row, cfg)| {
                let dir: PathBuf = out.join("rows").join(&row.id);
                let row_exp = ExperimentConfig { train: cfg.clone(), run: exp.run.clone() };
                match run_row(&row_exp, row, &dir) {
                    Ok(o) => RowResult { row: row.clone(), completed: true, error: None, outcome: Some(o) },
                    Err(e) => RowResult { row: row.clone(), completed: false, error: Some(e.to_string()), outcome: None },
                }
            })
            .collect()
    });
    let rec_of = |id: &str| {
        results.iter().find(|r| r.row.id == id).and_then(|r| r.outcome.as_ref()).map(|o| o.rec_error["mean"])
    };
    let rec_comparison = match (rec_of("kpu"), rec_of("base_c")) {
        (Some(kpu), Some(base_c_probe)) => Some(RecComparison { kpu, base_c_probe, kpu_lower: kpu < base_c_probe }),
        _ => None,
    };
    let summary = AblationSummary { seed: base.seed, steps: base.steps, rows: results, rec_comparison };
    let path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(&path, text + "\n").map_err(KpuError::io(&path))?;
    let path = out.join(TABLE_FILE);
    std::fs::write(&path, table_csv(&summary)).map_err(KpuError::io(&path))?;
    Ok(summary)
}

pub fn table_csv(s: &AblationSummary) -> String {
    let mut out = String::from(
        "id,group,pre,uni,rec,teachers,weighting,completed,l_s2t,l_t2s,l_rec,l_kpu,backbone_changed,native_gap,unified_gap,rec_error,rec_via_probe,run_hash\n",
    );
    for r in &s.rows {
        let f = r.row.flags;
        let group = serde_json::to_value(r.row.group).unwrap();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.row.id,
            group.as_str().unwrap(),
            f.preservation_on,
            f.unification_on,
            f.reconstruction_on,
            r.row.teachers.join(";"),
            r.row.weighting.name(),
            r.completed
        );
        match &r.outcome {
            Some(o) => {
                let t = o.final_losses.totals;
                let (gn, gu) = o.gaps.as_ref().map_or((String::new(), String::new()), |g| (g.native.to_string(), g.unified.to_string()));
                let _ = writeln!(
                    out,
                    ",{},{},{},{},{},{gn},{gu},{},{},{}",
                    t.s2t, t.t2s, t.rec, t.kpu, o.backbone_changed, o.rec_error["mean"], o.rec_via_probe, o.run_hash
                );
            }
            None => out.push_str(",,,,,,,,,,\n"),
        }
    }
    out
}
