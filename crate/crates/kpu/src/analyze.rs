//! Native versus unified feature distribution gaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use kpu_core::data::{generate_batch, stream_id};
use kpu_core::stats::{feature_stats, gap_ratio, unified_features, DistributionStats, GapRatio, StatSpace};
use kpu_core::trainer::Trainer;
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const GAPS_FILE: &str = "gaps.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceGap {
    pub stats: Vec<DistributionStats>,
    pub gap: GapRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub step: u64,
    pub images: usize,
    pub teachers: Vec<String>,
    pub native: SpaceGap,
    pub unified: SpaceGap,
    /// `unified.gap.ratio / native.gap.ratio`.
    pub reduction: f64,
    pub alignment: BTreeMap<String, f64>,
}

/// Gap ratios over the non-sentinel teachers (all teachers when fewer than
/// two are not the sentinel), measured on `images` seeded evaluation images.
pub fn analyze(trainer: &Trainer<f32>, images: usize) -> Result<GapReport> {
    let imgs = generate_batch::<f32>(&trainer.config.data, stream_id("analyze"), 0, images.max(2))?;
    let mut chosen: Vec<_> = trainer.teachers.iter().filter(|t| !t.spec.is_sentinel).collect();
    if chosen.len() < 2 {
        chosen = trainer.teachers.iter().collect();
    }
    let mut native = Vec::new();
    let mut unified = Vec::new();
    for t in &chosen {
        let id = &t.spec.id;
        native.push(feature_stats(id, StatSpace::Native, &t.forward_batch(&imgs)?)?);
        let u = unified_features(&trainer.model, &trainer.store, t, &imgs)?;
        unified.push(feature_stats(id, StatSpace::Unified, &u)?);
    }
    let (gn, gu) = (gap_ratio(&native)?, gap_ratio(&unified)?);
    Ok(GapReport {
        step: trainer.step,
        images: imgs.len(),
        teachers: chosen.iter().map(|t| t.spec.id.clone()).collect(),
        reduction: gu.ratio / gn.ratio,
        native: SpaceGap { stats: native, gap: gn },
        unified: SpaceGap { stats: unified, gap: gu },
        alignment: trainer.alignment(&imgs[..imgs.len().min(64)])?,
    })
}

pub fn format_table(r: &GapReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "step {}  images {}", r.step, r.images);
    let _ = writeln!(s, "{:<16} {:>12} {:>12} {:>10}", "teacher", "native std", "unified std", "alignment");
    for (n, u) in r.native.stats.iter().zip(&r.unified.stats) {
        let a = r.alignment.get(&n.teacher).copied().unwrap_or(f64::NAN);
        let _ = writeln!(s, "{:<16} {:>12.5} {:>12.5} {:>10.4}", n.teacher, n.pooled_std, u.pooled_std, a);
    }
    let _ = writeln!(s, "{:<16} {:>12.3} {:>12.3}", "gap ratio", r.native.gap.ratio, r.unified.gap.ratio);
    let _ = writeln!(s, "unified / native = {:.4}", r.reduction);
    s
}
