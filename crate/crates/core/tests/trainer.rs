use std::collections::BTreeMap;

use kpu_core::gradcheck::toy_config;
use kpu_core::objective::{l_total, smooth_l1, teacher_terms, LossBreakdown, LossFlags, LossWeights, TeacherLoss};
use kpu_core::rng::counter_rng;
use kpu_core::trainer::{TrainConfig, Trainer};
use kpu_core::weighting::{WeightingKind, WeightingState};
use kpu_core::{FeatureSet, SpaceTag, Tape, Tensor};
use rand::Rng;

fn grads(trainer: &mut Trainer<f64>, weights: &[f64]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let g = trainer.build_graph(&mut tape, &trainer.store, 0, weights).unwrap();
    tape.backward(g.total).unwrap();
    trainer.store.zero_grads();
    tape.accumulate_param_grads(&mut trainer.store).unwrap();
    trainer.trainable().iter().map(|&id| trainer.store.get(id).grad().unwrap().to_vec()).collect()
}

#[test]
fn accumulated_gradient_is_the_sum_of_per_teacher_gradients() {
    let mut t = Trainer::<f64>::new(toy_config()).unwrap();
    let w = t.weighting.weights(0);
    let joint = grads(&mut t, &w);
    let first = grads(&mut t, &[w[0], 0.0]);
    let second = grads(&mut t, &[0.0, w[1]]);
    let mut max = 0.0f64;
    for ((j, a), b) in joint.iter().zip(&first).zip(&second) {
        for ((j, a), b) in j.iter().zip(a).zip(b) {
            max = max.max((j - (a + b)).abs());
        }
    }
    assert!(max < 1e-6, "{max}");
}

fn toy(preservation: bool) -> TrainConfig {
    let mut cfg = toy_config();
    cfg.steps = 4;
    cfg.ablation.preservation_on = preservation;
    cfg
}

#[test]
fn preservation_keeps_backbone_and_teachers_fixed() {
    let mut t = Trainer::<f32>::new(toy(true)).unwrap();
    let backbone = t.backbone_fingerprint();
    assert_eq!(backbone, t.sentinel().store.fingerprint("backbone."));
    let teachers: Vec<u64> = t.teachers.iter().map(|t| t.fingerprint()).collect();
    let heads = t.store.fingerprint("heads.");
    let adapter = t.store.fingerprint("adapter.");
    for _ in 0..4 {
        t.train_step().unwrap();
        assert_eq!(t.backbone_fingerprint(), backbone);
    }
    assert_eq!(t.teachers.iter().map(|t| t.fingerprint()).collect::<Vec<_>>(), teachers);
    assert_ne!(t.store.fingerprint("heads."), heads);
    assert_ne!(t.store.fingerprint("adapter."), adapter);
    assert!(t.finished());
}

#[test]
fn without_preservation_the_backbone_moves_after_one_step() {
    let mut t = Trainer::<f32>::new(toy(false)).unwrap();
    let before = t.backbone_fingerprint();
    t.train_step().unwrap();
    assert_ne!(t.backbone_fingerprint(), before);
}

#[test]
fn runs_are_reproducible() {
    let run = || {
        let mut t = Trainer::<f32>::new(toy(true)).unwrap();
        let records: Vec<_> = (0..3).map(|_| t.train_step().unwrap()).collect();
        (records, t.store.fingerprint(""))
    };
    assert_eq!(run(), run());
}

#[test]
fn records_carry_lr_weights_and_consistent_totals() {
    let mut cfg = toy(true);
    cfg.weighting = WeightingKind::Teacherdrop;
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    for step in 0..4 {
        let r = t.train_step().unwrap();
        assert_eq!(r.step, step);
        let sum: f64 = r.weights.values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let mut kpu = 0.0;
        for (id, l) in &r.losses.teachers {
            assert_eq!(l.weight, r.weights[id]);
            assert!(l.s2t >= 0.0 && l.t2s.unwrap() >= 0.0 && l.rec.unwrap() >= 0.0);
            kpu += l.weight * l.total(1.0);
        }
        assert!((kpu - r.losses.totals.kpu).abs() < 1e-7);
    }
}

#[test]
fn default_batch_sizes() {
    let t = Trainer::<f32>::new(TrainConfig { steps: 1, ..Default::default() }).unwrap();
    let sizes: BTreeMap<String, usize> =
        t.teacher_ids().into_iter().enumerate().map(|(i, id)| (id, t.batch(i, 0).unwrap().len())).collect();
    assert_eq!(sizes["clip-like"], 8);
    assert_eq!(sizes["detector-like"], 2);
}

#[test]
fn t2s_and_rec_heads_receive_gradients() {
    let mut t = Trainer::<f64>::new(toy_config()).unwrap();
    let w = t.weighting.weights(0);
    grads(&mut t, &w);
    for part in ["t2s", "rec"] {
        let id = t.store.find(&format!("heads.dense.{part}.fc2.weight")).unwrap();
        assert!(t.store.get(id).grad().unwrap().iter().any(|&g| g != 0.0));
    }
    for teacher in &t.teachers {
        assert!(teacher.store.ids().all(|id| teacher.store.get(id).grad().is_none()));
    }
}

#[test]
fn zero_t2s_head_gives_neutral_cosine_terms() {
    let mut t = Trainer::<f64>::new(toy_config()).unwrap();
    let head = t.model.head("sentinel").unwrap().t2s;
    for p in [head.fc2.weight, head.fc2.bias] {
        t.store.get_mut(p).data_mut().fill(0.0);
    }
    let w = LossWeights::default();
    let image = &t.batch(0, 0).unwrap()[0];
    let target = t.teachers[0].forward(image).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let out = t.model.forward(&mut tape, &t.store, x).unwrap();
    let flags = LossFlags { unification: true, reconstruction: false };
    let terms = teacher_terms(&mut tape, &t.store, &t.model, "sentinel", &out, &target, flags, &w).unwrap();
    let zero = tape.constant(&Tensor::zeros(tape.shape(out.canonical.grid)).unwrap());
    let sl1 = smooth_l1(&mut tape, out.canonical.grid, zero, 1.0).unwrap();
    let expected = w.lambda1 + w.lambda2 + w.lambda3 * tape.item(sl1);
    assert!((tape.item(terms.t2s.unwrap()) - expected).abs() < 1e-12);
    assert!(terms.rec.is_none());
}

/// At init, the smooth-L1 part of a teacher's s2t term grows when that
/// teacher's magnitude is doubled.
#[test]
fn larger_teacher_magnitude_means_larger_smooth_l1() {
    let term = |scale: f64| {
        let mut cfg = TrainConfig { steps: 1, ..Default::default() };
        cfg.zoo[2].magnitude_scale *= scale;
        let t = Trainer::<f32>::new(cfg).unwrap();
        let image = &t.batch(2, 0).unwrap()[0];
        let target = t.teachers[2].forward(image).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let out = t.model.forward(&mut tape, &t.store, x).unwrap();
        let pred = t.model.project_s2t(&mut tape, &t.store, "detector-like", &out).unwrap();
        let tgt = FeatureSet::constant(&mut tape, &target, SpaceTag::Teacher("detector-like".into())).unwrap();
        let l = smooth_l1(&mut tape, pred.grid, tgt.grid, 1.0).unwrap();
        tape.item(l)
    };
    assert!(term(2.0) > term(1.0));
}

#[test]
fn total_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let [a, b, c] = [0.2, 0.3, 0.4].map(|v| tape.constant(&Tensor::scalar(v)));
    let l = l_total(&mut tape, b, Some(a), Some(c), 1.0).unwrap();
    assert!((tape.item(l) - 0.9).abs() < 1e-15);
    let l0 = l_total(&mut tape, b, Some(a), Some(c), 0.0).unwrap();
    assert!((tape.item(l0) - 0.5).abs() < 1e-15);
}

#[test]
fn equal_weights_average_hand_built_breakdowns() {
    let entry = |s2t: f64, t2s: f64, rec: f64, n: f64| TeacherLoss { s2t, t2s: Some(t2s), rec: Some(rec), weight: 1.0 / n };
    let two = BTreeMap::from([("a".to_string(), entry(1.0, 0.5, 0.25, 2.0)), ("b".to_string(), entry(3.0, 1.5, 0.75, 2.0))]);
    let b = LossBreakdown::from_teachers(two, 1.0);
    assert!((b.totals.s2t - 2.0).abs() < 1e-12);
    assert!((b.totals.t2s - 1.0).abs() < 1e-12);
    assert!((b.totals.rec - 0.5).abs() < 1e-12);
    assert!((b.totals.kpu - 3.5).abs() < 1e-12);
    let three = BTreeMap::from([
        ("a".to_string(), entry(0.3, 0.6, 0.9, 3.0)),
        ("b".to_string(), entry(0.6, 0.0, 0.3, 3.0)),
        ("c".to_string(), entry(0.0, 0.3, 0.0, 3.0)),
    ]);
    let b = LossBreakdown::from_teachers(three, 2.0);
    assert!((b.totals.s2t - 0.3).abs() < 1e-12);
    assert!((b.totals.t2s - 0.3).abs() < 1e-12);
    assert!((b.totals.kpu - (0.3 + 0.3 + 2.0 * 0.4)).abs() < 1e-12);
}

#[test]
fn teacherdrop_marginal_over_ten_thousand_draws() {
    let s = WeightingState::new(WeightingKind::Teacherdrop, 3, 12345);
    let mut counts = [0usize; 3];
    for step in 0..10_000 {
        let w = s.weights(step);
        let active: Vec<usize> = (0..3).filter(|&i| w[i] > 0.0).collect();
        assert!(!active.is_empty());
        for &i in &active {
            assert_eq!(w[i], 1.0 / active.len() as f64);
            counts[i] += 1;
        }
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((f - 4.0 / 7.0).abs() < 0.03, "{f}");
    }
}

#[test]
fn famo_weights_stay_on_the_simplex() {
    let mut s = WeightingState::new(WeightingKind::Famo, 3, 0);
    let mut rng = counter_rng(4, 4, 4);
    let mut losses = [3.0, 0.5, 10.0];
    for step in 0..500 {
        let w = s.weights(step);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for l in &mut losses {
            *l *= rng.random_range(0.9..1.05);
        }
        s.observe(&losses);
    }
}
