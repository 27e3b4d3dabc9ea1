//! Ablation rows and the post-hoc reconstruction probe.
//!
//! The suite has ten rows: four preservation/unification/reconstruction
//! combinations, three teacher subsets under the full objective, and the
//! three weighting strategies under the full objective.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{generate_batch, stream_id};
use crate::hash::fnv1a;
use crate::nn::MlpHead;
use crate::objective::l_align;
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{counter_rng, domain};
use crate::trainer::{AblationFlags, TrainConfig, Trainer};
use crate::weighting::WeightingKind;
use crate::{Error, FeatureSet, ParamId, ParamStore, Result, Scalar, SpaceTag, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowGroup {
    Components,
    Teachers,
    Weighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: String,
    pub group: RowGroup,
    pub flags: AblationFlags,
    pub teachers: Vec<String>,
    pub weighting: WeightingKind,
}

/// The ten rows derived from `base`, each with its full training config.
/// Every row shares `base`'s seed.
pub fn ablation_rows(base: &TrainConfig) -> Result<Vec<(AblationRow, TrainConfig)>> {
    let sentinel = base
        .zoo
        .iter()
        .find(|t| t.is_sentinel)
        .ok_or_else(|| Error::InvalidConfig("ablation needs a sentinel teacher".into()))?
        .id
        .clone();
    let others: Vec<String> = base.zoo.iter().filter(|t| !t.is_sentinel).map(|t| t.id.clone()).collect();
    if others.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "the teacher-subset rows need exactly two non-sentinel teachers, found {}",
            others.len()
        )));
    }
    let full = AblationFlags { preservation_on: true, unification_on: true, reconstruction_on: true };
    let all: Vec<String> = base.zoo.iter().map(|t| t.id.clone()).collect();
    let flags = |pre, uni, rec| AblationFlags { preservation_on: pre, unification_on: uni, reconstruction_on: rec };
    let mut rows = Vec::new();
    let mut push = |id: String, group, flags, teachers: Vec<String>, weighting| {
        rows.push(AblationRow { id, group, flags, teachers, weighting });
    };
    push("base_a".into(), RowGroup::Components, flags(false, false, false), all.clone(), WeightingKind::Equal);
    push("base_b".into(), RowGroup::Components, flags(true, false, false), all.clone(), WeightingKind::Equal);
    push("base_c".into(), RowGroup::Components, flags(true, true, false), all.clone(), WeightingKind::Equal);
    push("kpu".into(), RowGroup::Components, full, all.clone(), WeightingKind::Equal);
    for other in &others {
        push(format!("teachers_{other}"), RowGroup::Teachers, full, alloc::vec![sentinel.clone(), other.clone()], WeightingKind::Equal);
    }
    push("teachers_all".into(), RowGroup::Teachers, full, all.clone(), WeightingKind::Equal);
    for w in [WeightingKind::Equal, WeightingKind::Famo, WeightingKind::Teacherdrop] {
        push(format!("weighting_{}", w.name()), RowGroup::Weighting, full, all.clone(), w);
    }
    Ok(rows
        .into_iter()
        .map(|row| {
            let mut cfg = base.clone();
            cfg.ablation = row.flags;
            cfg.weighting = row.weighting;
            cfg.zoo.retain(|t| row.teachers.contains(&t.id));
            (row, cfg)
        })
        .collect())
}

/// Per-teacher `l_align(X^t, h_rec(h_t2s(X^t)))` averaged over `images`,
/// plus the equal-weight mean over teachers under `"mean"`.
pub fn reconstruction_error<S: Scalar>(trainer: &Trainer<S>, store: &ParamStore<S>, images: &[Tensor<S>]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let mut mean = 0.0;
    for t in &trainer.teachers {
        let mut sum = 0.0;
        for image in images {
            let mut tape = Tape::new();
            let v = rec_loss(trainer, store, &mut tape, t.spec.id.as_str(), &t.forward(image)?)?;
            sum += tape.item(v).as_f64();
        }
        let e = sum / images.len().max(1) as f64;
        mean += e / trainer.teachers.len() as f64;
        out.insert(t.spec.id.clone(), e);
    }
    out.insert("mean".into(), mean);
    Ok(out)
}

fn rec_loss<S: Scalar>(
    trainer: &Trainer<S>,
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    id: &str,
    native: &crate::features::FeatureValues<S>,
) -> Result<crate::Var> {
    let model = &trainer.model;
    let target = FeatureSet::constant(tape, native, SpaceTag::Teacher(id.into()))?;
    let u = model.project_t2s(tape, store, id, &target, model.grid_hw())?;
    let back = model.reconstruct(tape, store, id, &u, target.hw())?;
    l_align(tape, &target, &back, &trainer.config.loss_weights)
}

/// Freshly initialized reconstruction heads fitted on top of a trained
/// model whose every other parameter stays fixed. Uses the trainer's own
/// data streams, batch sizes, optimizer settings and schedule for `steps`
/// steps, so a run that never trained its reconstruction heads can be
/// measured with the same budget as one that did. Returns the fitted store.
pub fn fit_rec_probe<S: Scalar>(trainer: &Trainer<S>, steps: u64) -> Result<ParamStore<S>> {
    let cfg = &trainer.config;
    let mut store = trainer.store.clone();
    let d = cfg.student.backbone.dim;
    let mut heads: Vec<ParamId> = Vec::new();
    for t in &trainer.teachers {
        let spec = &t.spec;
        let head = trainer.model.head(&spec.id)?;
        let mut scratch = ParamStore::<S>::new();
        let mut rng = counter_rng(cfg.seed, domain("rec-probe"), fnv1a(spec.id.as_bytes()));
        let name = format!("heads.{}.rec", spec.id);
        MlpHead::new(&mut scratch, &name, d, spec.feature_dim, Some(head.rec.hidden()), &mut rng)?;
        for (_, p) in scratch.iter() {
            store.assign(&p.name, p.tensor.shape(), p.tensor.data())?;
        }
        heads.extend([head.rec.fc1.weight, head.rec.fc1.bias, head.rec.fc2.weight, head.rec.fc2.bias]);
    }
    let all: Vec<ParamId> = store.ids().collect();
    for id in all {
        store.set_requires_grad(id, heads.contains(&id));
    }
    let mut opt = AdamW::new(&store, &heads, cfg.weight_decay);
    let inv_t = 1.0 / trainer.teachers.len() as f64;
    for step in 0..steps {
        let mut tape = Tape::new();
        let mut total = None;
        for t in &trainer.teachers {
            let images = generate_batch::<S>(&cfg.data, stream_id(&t.spec.id), step, t.spec.batch_size)?;
            let scale = S::of(inv_t / images.len() as f64);
            for image in &images {
                let v = rec_loss(trainer, &store, &mut tape, &t.spec.id, &t.forward(image)?)?;
                let v = tape.scale(v, scale)?;
                total = Some(match total {
                    None => v,
                    Some(acc) => tape.add(acc, v)?,
                });
            }
        }
        let total = total.ok_or_else(|| Error::InvalidConfig("no teachers".into()))?;
        if !tape.item(total).as_f64().is_finite() {
            return Err(Error::NonFiniteLoss("rec-probe".into()));
        }
        tape.backward(total)?;
        store.zero_grads();
        tape.accumulate_param_grads(&mut store)?;
        drop(tape);
        opt.update(&mut store, cosine_lr(step, steps, cfg.lr, cfg.warmup_steps))?;
    }
    Ok(store)
}
