//! Experiment files: a training config plus a `run` section, all in one
//! JSON object. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use kpu_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{KpuError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        let d = kpu_core::gradcheck::GradCheckOptions::default();
        Self { step: d.step, tolerance: d.tolerance, floor: d.floor }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Used when `--out` is not given.
    pub out_dir: Option<PathBuf>,
    /// Flush the metrics stream every this many records.
    pub metrics_flush_every: u64,
    /// Attach an alignment snapshot every this many steps (0 disables).
    /// The first and last steps always carry one.
    pub alignment_every: u64,
    /// Write `step_<n>.kpuc` every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Images in the alignment evaluation batch.
    pub eval_images: usize,
    /// Images used by `analyze` and the ablation gap measurement.
    pub analyze_images: usize,
    /// Steps per ablation row; `None` uses `steps`.
    pub ablation_steps: Option<u64>,
    /// Rows trained concurrently by `ablate`.
    pub ablation_jobs: usize,
    pub gradcheck: GradCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: None,
            metrics_flush_every: 1,
            alignment_every: 100,
            checkpoint_every: 0,
            eval_images: 32,
            analyze_images: 256,
            ablation_steps: None,
            ablation_jobs: 1,
            gradcheck: GradCheckSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_value(mut value: Value) -> Result<Self> {
        let obj = value.as_object_mut().ok_or_else(|| KpuError::Config("experiment config must be a JSON object".into()))?;
        let run = match obj.remove("run") {
            Some(v) => serde_json::from_value(v).map_err(|e| KpuError::Config(format!("run: {e}")))?,
            None => RunConfig::default(),
        };
        let train: TrainConfig = serde_json::from_value(value).map_err(|e| KpuError::Config(e.to_string()))?;
        train.validate().map_err(|e| KpuError::Config(e.to_string()))?;
        Ok(Self { train, run })
    }

    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.train).expect("config serializes");
        v.as_object_mut().unwrap().insert("run".into(), serde_json::to_value(&self.run).expect("config serializes"));
        v
    }

    /// Reads `path` (or starts from defaults when `None`), applies
    /// `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(KpuError::io(p))?;
                serde_json::from_str(&text).map_err(|e| KpuError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// Applies `a.b.c=value`. The value is parsed as JSON when it parses,
/// otherwise taken as a string. Numeric segments index into arrays.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| KpuError::Config(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() {
        return Err(KpuError::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).into(), value);
                    return Ok(());
                }
                map.entry(*part).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| KpuError::Config(format!("override `{path}`: `{part}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| KpuError::Config(format!("override `{path}`: index {idx} out of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(KpuError::Config(format!("override `{path}`: `{part}` is inside a scalar"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c = ExperimentConfig::from_value(serde_json::json!({})).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_value(c.to_value()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for v in [
            serde_json::json!({"stepz": 3}),
            serde_json::json!({"run": {"bogus": 1}}),
            serde_json::json!({"ablation": {"preservation": true}}),
            serde_json::json!({"zoo": [{"id": "x", "extra": 1}]}),
        ] {
            assert!(matches!(ExperimentConfig::from_value(v), Err(KpuError::Config(_))));
        }
    }

    #[test]
    fn overrides() {
        let mut v = ExperimentConfig::default().to_value();
        apply_override(&mut v, "ablation.reconstruction_on=false").unwrap();
        apply_override(&mut v, "zoo.2.magnitude_scale=6.68").unwrap();
        apply_override(&mut v, "weighting=famo").unwrap();
        apply_override(&mut v, "run.alignment_every=5").unwrap();
        let c = ExperimentConfig::from_value(v.clone()).unwrap();
        assert!(!c.train.ablation.reconstruction_on);
        assert_eq!(c.train.zoo[2].magnitude_scale, 6.68);
        assert_eq!(c.train.weighting, kpu_core::weighting::WeightingKind::Famo);
        assert_eq!(c.run.alignment_every, 5);
        assert!(apply_override(&mut v, "zoo.9.seed=1").is_err());
        assert!(apply_override(&mut v, "steps").is_err());
        apply_override(&mut v, "no_such_key=1").unwrap();
        assert!(ExperimentConfig::from_value(v).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let v = serde_json::json!({"steps": 0});
        assert!(matches!(ExperimentConfig::from_value(v), Err(KpuError::Config(_))));
    }
}
