//! Per-step teacher weights: equal, a FAMO-style log-improvement balancer,
//! and TeacherDrop.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{counter_rng, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingKind {
    #[default]
    Equal,
    Famo,
    Teacherdrop,
}

impl WeightingKind {
    pub fn name(self) -> &'static str {
        match self {
            WeightingKind::Equal => "equal",
            WeightingKind::Famo => "famo",
            WeightingKind::Teacherdrop => "teacherdrop",
        }
    }
}

pub const FAMO_LR: f64 = 0.025;
const LOSS_FLOOR: f64 = 1e-12;

/// Mutable part of a weighting strategy. TeacherDrop is a pure function
/// of `(seed, step)` and keeps no state.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingState {
    pub kind: WeightingKind,
    pub seed: u64,
    /// FAMO logits, one per teacher.
    pub logits: Vec<f64>,
    /// Per-teacher losses of the previous step, for FAMO.
    pub prev: Option<Vec<f64>>,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| libm::exp(v - max)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl WeightingState {
    pub fn new(kind: WeightingKind, teachers: usize, seed: u64) -> Self {
        Self { kind, seed, logits: vec![0.0; teachers], prev: None }
    }

    pub fn teachers(&self) -> usize {
        self.logits.len()
    }

    /// Weights to apply at `step`.
    pub fn weights(&self, step: u64) -> Vec<f64> {
        let t = self.teachers();
        match self.kind {
            WeightingKind::Equal => vec![1.0 / t as f64; t],
            WeightingKind::Famo => softmax(&self.logits),
            WeightingKind::Teacherdrop => {
                let mask = self.drop_mask(step);
                let active = mask.iter().filter(|&&m| m).count() as f64;
                mask.iter().map(|&m| if m { 1.0 / active } else { 0.0 }).collect()
            }
        }
    }

    /// Uniformly random non-empty subset of teachers for `step`.
    pub fn drop_mask(&self, step: u64) -> Vec<bool> {
        let t = self.teachers();
        let mut rng = counter_rng(self.seed, domain("teacherdrop"), step);
        let bits: u64 = rng.random_range(1..(1u64 << t));
        (0..t).map(|i| bits >> i & 1 == 1).collect()
    }

    /// Feeds back this step's unweighted per-teacher losses. Only FAMO
    /// reacts: a teacher whose log-loss improved more than average loses
    /// logit mass, one that improved less gains it.
    pub fn observe(&mut self, losses: &[f64]) {
        if self.kind != WeightingKind::Famo {
            return;
        }
        let cur: Vec<f64> = losses.iter().map(|l| libm::log(l.max(LOSS_FLOOR))).collect();
        if let Some(prev) = &self.prev {
            let c: Vec<f64> = prev.iter().zip(&cur).map(|(p, q)| p - q).collect();
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            for (x, ci) in self.logits.iter_mut().zip(&c) {
                *x -= FAMO_LR * (ci - mean);
            }
        }
        self.prev = Some(cur);
    }
}
