//! Training engine: per-teacher batches accumulated into one objective,
//! one backward pass and one AdamW update per step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{generate_batch, stream_id, SyntheticDataConfig};
use crate::objective::{teacher_terms, LossBreakdown, LossFlags, LossWeights, TeacherLoss, TeacherTerms};
use crate::optim::{cosine_lr, AdamW};
use crate::stats::alignment_quality;
use crate::student::{StudentConfig, StudentModel, TrainPolicy};
use crate::teacher::{build_teacher, default_zoo, sentinel_init_student, validate_zoo, Teacher, TeacherSpec};
use crate::weighting::{WeightingKind, WeightingState};
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub preservation_on: bool,
    /// Enables the teacher-to-student term.
    pub unification_on: bool,
    /// Enables the reconstruction term.
    pub reconstruction_on: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { preservation_on: true, unification_on: true, reconstruction_on: true }
    }
}

impl AblationFlags {
    pub fn policy(self) -> TrainPolicy {
        TrainPolicy { preservation_on: self.preservation_on }
    }

    pub fn loss_flags(self) -> LossFlags {
        LossFlags { unification: self.unification_on, reconstruction: self.reconstruction_on }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: Scheduler,
    pub warmup_steps: u64,
    pub seed: u64,
    pub weighting: WeightingKind,
    pub ablation: AblationFlags,
    pub loss_weights: LossWeights,
    pub zoo: Vec<TeacherSpec>,
    pub data: SyntheticDataConfig,
    pub student: StudentConfig,
    /// Start the sentinel's head triple as the identity map.
    pub identity_sentinel_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 2e-4,
            weight_decay: 0.05,
            scheduler: Scheduler::Cosine,
            warmup_steps: 0,
            seed: 0,
            weighting: WeightingKind::Equal,
            ablation: AblationFlags::default(),
            loss_weights: LossWeights::default(),
            zoo: default_zoo(),
            data: SyntheticDataConfig::default(),
            student: StudentConfig::default(),
            identity_sentinel_heads: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if self.weighting == WeightingKind::Teacherdrop && self.zoo.len() > 63 {
            return bad("teacherdrop supports at most 63 teachers".into());
        }
        self.loss_weights.validate()?;
        self.student.validate()?;
        self.data.validate()?;
        validate_zoo(&self.zoo)?;
        let size = self.student.backbone.image_size;
        if self.data.image_size != [size, size] {
            return bad(format!("data image size {:?} differs from the student input {size}", self.data.image_size));
        }
        for t in &self.zoo {
            if t.input_size != self.data.image_size {
                return bad(format!("teacher `{}` input size {:?} differs from the data", t.id, t.input_size));
            }
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub weights: BTreeMap<String, f64>,
    pub losses: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alignment: Option<BTreeMap<String, f64>>,
}

/// Batch-averaged terms of every teacher plus the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGraph {
    pub total: Var,
    pub per_teacher: Vec<TeacherTerms>,
}

#[derive(Debug, Clone)]
pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub model: StudentModel,
    pub store: ParamStore<S>,
    pub teachers: Vec<Teacher<S>>,
    pub optimizer: AdamW<S>,
    pub weighting: WeightingState,
    /// Index of the next step to run.
    pub step: u64,
    trainable: Vec<ParamId>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let teachers = config.zoo.iter().map(build_teacher).collect::<Result<Vec<Teacher<S>>>>()?;
        let mut store = ParamStore::new();
        let model = StudentModel::new(&mut store, &config.student, &config.zoo, config.seed, config.identity_sentinel_heads)?;
        let sentinel = teachers.iter().find(|t| t.spec.is_sentinel).expect("validated zoo has a sentinel");
        sentinel_init_student(sentinel, &model, &mut store)?;
        let trainable = model.apply_policy(&mut store, config.ablation.policy());
        let optimizer = AdamW::new(&store, &trainable, config.weight_decay);
        let weighting = WeightingState::new(config.weighting, teachers.len(), config.seed);
        Ok(Self { config, model, store, teachers, optimizer, weighting, step: 0, trainable })
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn teacher_ids(&self) -> Vec<String> {
        self.teachers.iter().map(|t| t.spec.id.clone()).collect()
    }

    pub fn sentinel(&self) -> &Teacher<S> {
        self.teachers.iter().find(|t| t.spec.is_sentinel).expect("validated zoo has a sentinel")
    }

    /// Images teacher `index` sees at `step`.
    pub fn batch(&self, index: usize, step: u64) -> Result<Vec<Tensor<S>>> {
        let spec = &self.teachers[index].spec;
        generate_batch(&self.config.data, stream_id(&spec.id), step, spec.batch_size)
    }

    /// Records the weighted objective for `step` on `tape`, reading
    /// student parameters from `store`.
    pub fn build_graph(&self, tape: &mut Tape<S>, store: &ParamStore<S>, step: u64, weights: &[f64]) -> Result<StepGraph> {
        let flags = self.config.ablation.loss_flags();
        let w = &self.config.loss_weights;
        let mut per_teacher = Vec::with_capacity(self.teachers.len());
        let mut total: Option<Var> = None;
        for (i, teacher) in self.teachers.iter().enumerate() {
            let id = teacher.spec.id.as_str();
            let images = self.batch(i, step)?;
            let mut sums: Option<TeacherTerms> = None;
            for image in &images {
                let target = teacher.forward(image)?;
                let x = tape.constant(image);
                let out = self.model.forward(tape, store, x)?;
                let t = teacher_terms(tape, store, &self.model, id, &out, &target, flags, w)?;
                sums = Some(match sums {
                    None => t,
                    Some(acc) => TeacherTerms {
                        s2t: tape.add(acc.s2t, t.s2t)?,
                        t2s: add_opt(tape, acc.t2s, t.t2s)?,
                        rec: add_opt(tape, acc.rec, t.rec)?,
                    },
                });
            }
            let sums = sums.ok_or_else(|| Error::InvalidConfig(format!("teacher `{id}` has an empty batch")))?;
            let inv = S::of(1.0 / images.len() as f64);
            let terms = TeacherTerms {
                s2t: tape.scale(sums.s2t, inv)?,
                t2s: sums.t2s.map(|v| tape.scale(v, inv)).transpose()?,
                rec: sums.rec.map(|v| tape.scale(v, inv)).transpose()?,
            };
            let own = crate::objective::l_total(tape, terms.s2t, terms.t2s, terms.rec, w.lambda)?;
            let weighted = tape.scale(own, S::of(weights[i]))?;
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
            per_teacher.push(terms);
        }
        let total = total.ok_or_else(|| Error::InvalidConfig("no teachers".into()))?;
        Ok(StepGraph { total, per_teacher })
    }

    fn breakdown(&self, tape: &Tape<S>, graph: &StepGraph, weights: &[f64]) -> Result<LossBreakdown> {
        let mut teachers = BTreeMap::new();
        for ((teacher, terms), &weight) in self.teachers.iter().zip(&graph.per_teacher).zip(weights) {
            let id = &teacher.spec.id;
            let read = |name: &str, v: Var| {
                let x = tape.item(v).as_f64();
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::NonFiniteLoss(format!("{name}:{id}")))
                }
            };
            let entry = TeacherLoss {
                s2t: read("s2t", terms.s2t)?,
                t2s: terms.t2s.map(|v| read("t2s", v)).transpose()?,
                rec: terms.rec.map(|v| read("rec", v)).transpose()?,
                weight,
            };
            teachers.insert(id.clone(), entry);
        }
        Ok(LossBreakdown::from_teachers(teachers, self.config.loss_weights.lambda))
    }

    /// Runs one optimization step.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let lr = cosine_lr(step, self.config.steps, self.config.lr, self.config.warmup_steps);
        let weights = self.weighting.weights(step);
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, &self.store, step, &weights)?;
        let losses = self.breakdown(&tape, &graph, &weights)?;
        if !tape.item(graph.total).as_f64().is_finite() {
            return Err(Error::NonFiniteLoss("total".into()));
        }
        tape.backward(graph.total)?;
        self.store.zero_grads();
        tape.accumulate_param_grads(&mut self.store)?;
        drop(tape);
        self.optimizer.update(&mut self.store, lr)?;
        self.weighting.observe(&losses.teacher_totals(self.config.loss_weights.lambda));
        self.step += 1;
        let weights = self.teacher_ids().into_iter().zip(weights).collect();
        Ok(MetricsRecord { step, lr, weights, losses, alignment: None })
    }

    /// Alignment quality per teacher on `images`.
    pub fn alignment(&self, images: &[Tensor<S>]) -> Result<BTreeMap<String, f64>> {
        self.teachers
            .iter()
            .map(|t| Ok((t.spec.id.clone(), alignment_quality(&self.model, &self.store, t, images)?)))
            .collect()
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        StudentModel::backbone_fingerprint(&self.store)
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.steps
    }
}

fn add_opt<S: Scalar>(tape: &mut Tape<S>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(Some(tape.add(a, b)?)),
        (a, None) => Ok(a),
        (None, b) => Ok(b),
    }
}
