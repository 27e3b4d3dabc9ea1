//! The acceptance criteria, one pass/fail line each. Long trainings go
//! through the `kpu` binary so the measured runtimes match real use.
//!
//! Built without the libtest harness so the report is always printed.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use kpu::ablation::AblationSummary;
use kpu::analyze::{analyze, GapReport};
use kpu::checkpoint::{self, Checkpoint};
use kpu::metrics::{read_metrics, METRICS_FILE};
use kpu::runner::{step_checkpoint, FINAL_CHECKPOINT};
use kpu_core::ablation::RowGroup;
use kpu_core::data::{generate_batch, SyntheticDataConfig};
use kpu_core::gradcheck::toy_config;
use kpu_core::objective::{l_align, l_total, LossBreakdown, LossWeights, TeacherLoss};
use kpu_core::trainer::{AblationFlags, TrainConfig, Trainer};
use kpu_core::weighting::{WeightingKind, WeightingState};
use kpu_core::features::FeatureValues;
use kpu_core::{FeatureSet, SpaceTag, Tape, Tensor};
use kpu_core::rng::{counter_rng, StreamRng};
use rand::Rng;

type Outcome = Result<String, String>;
type Alignment = BTreeMap<String, f64>;

fn kpu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpu")).args(args).output().expect("binary runs")
}

fn kpu_ok(args: &[&str]) -> Result<Output, String> {
    let o = kpu(args);
    if o.status.success() {
        Ok(o)
    } else {
        Err(format!("`kpu {}` exited {:?}: {}", args.join(" "), o.status.code(), String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {:.1} s, limit {} s", t.as_secs_f64(), limit.as_secs()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let o = kpu(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    ensure(o.status.code() == Some(0), || format!("exit {:?}\n{text}", o.status.code()))?;
    within(start, Duration::from_secs(60), "gradcheck")?;
    let objective = text.lines().find(|l| l.starts_with("kpu-objective")).unwrap_or("").split_whitespace().nth(4).unwrap_or("?").to_string();
    let cases = text.lines().filter(|l| l.ends_with(" ok")).count();
    Ok(format!("{cases} cases below 1e-5, objective worst {objective}, {:.1} s", start.elapsed().as_secs_f64()))
}

fn random_set(tape: &mut Tape<f64>, rng: &mut StreamRng, space: SpaceTag) -> FeatureSet {
    let v = FeatureValues {
        global: Some(Tensor::from_fn(&[6], |_| rng.random_range(-2.0..2.0)).unwrap()),
        grid: Tensor::from_fn(&[3, 4, 6], |_| rng.random_range(-5.0..5.0)).unwrap(),
    };
    FeatureSet::constant(tape, &v, space).unwrap()
}

fn loss_identities() -> Outcome {
    let start = Instant::now();
    let mut rng = counter_rng(2, 2, 2);
    let mut worst_self = 0.0f64;
    for _ in 0..20 {
        let mut tape = Tape::<f64>::new();
        let x = random_set(&mut tape, &mut rng, SpaceTag::Unified);
        let l = l_align(&mut tape, &x, &x, &LossWeights::default()).map_err(|e| e.to_string())?;
        worst_self = worst_self.max(tape.item(l).abs());
    }
    ensure(worst_self == 0.0, || format!("l_align(X, X) = {worst_self:e}"))?;

    // Full graphs on two- and three-teacher toy models with equal weights.
    let mut worst_total = 0.0f64;
    let mut worst_mean = 0.0f64;
    for teachers in [2, 3] {
        let mut cfg = toy_config();
        cfg.loss_weights.lambda = 0.7;
        if teachers == 3 {
            let mut extra = cfg.zoo[1].clone();
            extra.id = "dense-b".into();
            extra.seed = 11;
            extra.magnitude_scale *= 3.0;
            cfg.zoo.push(extra);
        }
        let trainer = Trainer::<f64>::new(cfg).map_err(|e| e.to_string())?;
        let weights = WeightingState::new(WeightingKind::Equal, teachers, 0).weights(0);
        let mut tape = Tape::new();
        let g = trainer.build_graph(&mut tape, &trainer.store, 0, &weights).map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for terms in &g.per_teacher {
            let (s, t, r) = (tape.item(terms.s2t), tape.item(terms.t2s.unwrap()), tape.item(terms.rec.unwrap()));
            let lt = l_total(&mut tape, terms.s2t, terms.t2s, terms.rec, 0.7).unwrap();
            worst_total = worst_total.max((tape.item(lt) - (t + s + 0.7 * r)).abs());
            sum += t + s + 0.7 * r;
        }
        worst_mean = worst_mean.max((tape.item(g.total) - sum / teachers as f64).abs());
    }
    ensure(worst_total < 1e-7, || format!("l_total identity off by {worst_total:e}"))?;
    ensure(worst_mean < 1e-12, || format!("equal weighting differs from the 1/T mean by {worst_mean:e}"))?;

    // Hand-built per-teacher entries.
    let entry = |s2t: f64, t2s: f64, rec: f64, n: f64| TeacherLoss { s2t, t2s: Some(t2s), rec: Some(rec), weight: 1.0 / n };
    let two = LossBreakdown::from_teachers(BTreeMap::from([("a".into(), entry(1.0, 0.5, 0.25, 2.0)), ("b".into(), entry(3.0, 1.5, 0.75, 2.0))]), 1.0);
    let three = LossBreakdown::from_teachers(
        BTreeMap::from([("a".into(), entry(0.3, 0.6, 0.9, 3.0)), ("b".into(), entry(0.6, 0.0, 0.3, 3.0)), ("c".into(), entry(0.0, 0.3, 0.0, 3.0))]),
        2.0,
    );
    ensure((two.totals.kpu - 3.5).abs() < 1e-12 && (three.totals.kpu - 1.4).abs() < 1e-12, || {
        format!("hand-built totals {} and {}", two.totals.kpu, three.totals.kpu)
    })?;
    within(start, Duration::from_secs(5), "loss identities")?;
    Ok(format!("l_align(X,X)=0, l_total off by {worst_total:.1e}, 1/T mean off by {worst_mean:.1e}"))
}

fn preservation(default_run: &Path) -> Outcome {
    let t = checkpoint::load(&default_run.join(FINAL_CHECKPOINT)).map_err(|e| e.to_string())?;
    let backbone = t.backbone_fingerprint();
    let sentinel = t.sentinel().store.fingerprint("backbone.");
    ensure(t.step == 300, || format!("checkpoint at step {}", t.step))?;
    ensure(backbone == sentinel, || format!("backbone {backbone:016x} differs from the sentinel {sentinel:016x}"))?;
    let cfg = TrainConfig {
        ablation: AblationFlags { preservation_on: false, unification_on: false, reconstruction_on: false },
        ..Default::default()
    };
    let mut base_a = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let before = base_a.backbone_fingerprint();
    base_a.train_step().map_err(|e| e.to_string())?;
    ensure(base_a.backbone_fingerprint() != before, || "base_a backbone unchanged after one step".into())?;
    Ok(format!("backbone hash {backbone:016x} equals the sentinel after 300 steps; base_a differs after 1"))
}

fn init_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig { identity_sentinel_heads: true, ..Default::default() };
    let t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let images = generate_batch::<f32>(&SyntheticDataConfig::default(), 99, 0, 16).map_err(|e| e.to_string())?;
    for (i, image) in images.iter().enumerate() {
        let expected = t.sentinel().forward(image).map_err(|e| e.to_string())?;
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let out = t.model.forward(&mut tape, &t.store, x).map_err(|e| e.to_string())?;
        ensure(tape.value(out.canonical.grid) == expected.grid.data(), || format!("image {i}: grid differs"))?;
        let g = expected.global.as_ref().map(|g| g.data());
        ensure(out.canonical.global.map(|v| tape.value(v)) == g, || format!("image {i}: global differs"))?;
    }
    let weights = t.weighting.weights(0);
    let mut tape = Tape::new();
    let g = t.build_graph(&mut tape, &t.store, 0, &weights).map_err(|e| e.to_string())?;
    let i = t.teachers.iter().position(|x| x.spec.is_sentinel).unwrap();
    let l = tape.item(g.per_teacher[i].s2t) as f64;
    ensure(l < 1e-6, || format!("sentinel s2t loss at step 0 is {l:e}"))?;
    within(start, Duration::from_secs(10), "init equivalence")?;
    Ok(format!("16 images bit-exact, sentinel s2t at step 0 = {l:.1e}"))
}

fn gap_reduction(report: &GapReport, untrained: f64) -> Outcome {
    let (n, u) = (report.native.gap.ratio, report.unified.gap.ratio);
    ensure(report.step == 1000, || format!("analyzed step {}", report.step))?;
    ensure(u < n && u < 0.5 * n, || format!("native {n:.2}, unified {u:.2}"))?;
    Ok(format!("native {n:.2}, unified {u:.2} ({:.3}x); untrained heads give {untrained:.2}", u / n))
}

fn alignment_pair(dir: &Path) -> Result<(Alignment, Alignment), String> {
    let records = read_metrics(&dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let first = records.first().and_then(|r| r.alignment.clone()).ok_or("no alignment at step 1")?;
    let last = records.last().and_then(|r| r.alignment.clone()).ok_or("no alignment at the last step")?;
    Ok((first, last))
}

fn fmt_alignment(a: &BTreeMap<String, f64>) -> String {
    a.iter().map(|(k, v)| format!("{k} {v:.3}")).collect::<Vec<_>>().join(", ")
}

fn balanced_transfer(kpu_run: &Path, base_a_run: &Path) -> Outcome {
    let (first, last) = alignment_pair(kpu_run)?;
    for (id, a) in &last {
        ensure(*a > first[id], || format!("{id}: {:.4} at step 1000, {:.4} at step 1", a, first[id]))?;
    }
    let (bf, bl) = alignment_pair(base_a_run)?;
    Ok(format!(
        "kpu step 1 [{}] -> step 1000 [{}]; base_a step 1 [{}] -> step 1000 [{}]",
        fmt_alignment(&first),
        fmt_alignment(&last),
        fmt_alignment(&bf),
        fmt_alignment(&bl)
    ))
}

fn ablation_structure(out: &Path) -> Outcome {
    let start = Instant::now();
    kpu_ok(&["ablate", "--out", p(out), "-O", "run.ablation_steps=20", "-O", "run.analyze_images=64"])?;
    within(start, Duration::from_secs(30 * 60), "ablation")?;
    let s: AblationSummary = serde_json::from_slice(&std::fs::read(out.join("ablation_summary.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure(s.rows.len() == 10, || format!("{} rows", s.rows.len()))?;
    ensure(s.failed().is_empty(), || format!("failed rows: {:?}", s.failed()))?;
    let count = |g: RowGroup| s.rows.iter().filter(|r| r.row.group == g).count();
    ensure([count(RowGroup::Components), count(RowGroup::Teachers), count(RowGroup::Weighting)] == [4, 3, 3], || "group sizes".into())?;
    let expected = [("base_a", [false, false, false]), ("base_b", [true, false, false]), ("base_c", [true, true, false]), ("kpu", [true, true, true])];
    for r in &s.rows {
        let f = r.row.flags;
        let got = [f.preservation_on, f.unification_on, f.reconstruction_on];
        let want = expected.iter().find(|(id, _)| *id == r.row.id).map_or([true; 3], |e| e.1);
        ensure(got == want, || format!("{}: flags {got:?}, expected {want:?}", r.row.id))?;
        let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("rows").join(&r.row.id).join("config.json")).unwrap()).unwrap();
        ensure(cfg["seed"].as_u64() == Some(s.seed), || format!("{}: seed {}", r.row.id, cfg["seed"]))?;
        let losses = &r.outcome.as_ref().unwrap().final_losses.teachers;
        for t in losses.values() {
            ensure(t.t2s.is_some() == want[1] && t.rec.is_some() == want[2], || format!("{}: loss terms do not match the flags", r.row.id))?;
        }
    }
    let rec = s.rec_comparison.as_ref().map_or("n/a".into(), |c| format!("rec error kpu {:.3} vs base_c probe {:.3}", c.kpu, c.base_c_probe));
    Ok(format!("10 rows, seed {}, flags match; {rec}; {:.0} s", s.seed, start.elapsed().as_secs_f64()))
}

fn determinism(dir: &Path) -> Outcome {
    let start = Instant::now();
    let run = |name: &str, extra: &[&str]| -> Result<std::path::PathBuf, String> {
        let out = dir.join(name);
        let mut args = vec!["train", "--out", p(&out), "-O", "steps=10", "-O", "run.alignment_every=3"];
        args.extend_from_slice(extra);
        kpu_ok(&args)?;
        Ok(out)
    };
    let (a, b) = (run("a", &[])?, run("b", &[])?);
    let split = run("split", &["--stop-after", "5"])?;
    let resume = split.join(step_checkpoint(5));
    run("split", &["--resume", p(&resume)])?;
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(|e| e.to_string());
    for f in [METRICS_FILE, FINAL_CHECKPOINT] {
        ensure(read(&a, f)? == read(&b, f)?, || format!("identical runs differ in {f}"))?;
        ensure(read(&a, f)? == read(&split, f)?, || format!("5+5 split differs from 10 steps in {f}"))?;
    }
    let bytes = read(&a, FINAL_CHECKPOINT)?;
    let restored = Checkpoint::decode(&bytes).map_err(|e| e.to_string())?.restore().map_err(|e| e.to_string())?;
    ensure(Checkpoint::capture(&restored).encode() == bytes, || "checkpoint round trip changed bytes".into())?;
    within(start, Duration::from_secs(120), "determinism")?;
    Ok(format!("repeat, 5+5 resume and round trip byte-identical ({} byte checkpoint)", bytes.len()))
}

fn convergence(default_run: &Path) -> Outcome {
    let records = read_metrics(&default_run.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    ensure(records.len() == 300, || format!("{} records", records.len()))?;
    let (first, last) = (records[0].losses.totals.kpu, records[299].losses.totals.kpu);
    ensure(last < 0.5 * first, || format!("L_KPU {first:.4} -> {last:.4}"))?;
    let cfg = &records[0];
    ensure((cfg.lr - 2e-4).abs() < 1e-15 && records[299].lr < 1e-6, || "learning-rate schedule".into())?;
    Ok(format!("L_KPU {first:.4} -> {last:.4} ({:.3}x)", last / first))
}

fn weighting() -> Outcome {
    let start = Instant::now();
    let s = WeightingState::new(WeightingKind::Teacherdrop, 3, 7);
    let mut counts = [0usize; 3];
    for step in 0..10_000 {
        for (c, w) in counts.iter_mut().zip(s.weights(step)) {
            *c += usize::from(w > 0.0);
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 10_000.0).collect();
    ensure(freq.iter().all(|f| (f - 4.0 / 7.0).abs() <= 0.03), || format!("activation frequencies {freq:?}"))?;

    let mut same = WeightingState::new(WeightingKind::Famo, 3, 0);
    let mut spread = 0.0f64;
    for step in 0..200 {
        let w = same.weights(step);
        spread = spread.max(w.iter().fold(0.0, |m, x| f64::max(m, (x - 1.0 / 3.0).abs())));
        let l = 2.0 * 0.99f64.powi(step as i32);
        same.observe(&[l, l, l]);
    }
    ensure(spread < 1e-12, || format!("famo drifted {spread:e} from uniform"))?;

    let mut cfg = toy_config();
    cfg.weighting = WeightingKind::Famo;
    cfg.steps = 30;
    let mut t = Trainer::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    while !t.finished() {
        let r = t.train_step().map_err(|e| e.to_string())?;
        ensure(r.weights.values().all(|&w| w >= 0.0), || format!("negative weight at step {}", r.step))?;
        worst = worst.max((r.weights.values().sum::<f64>() - 1.0).abs());
    }
    ensure(worst < 1e-12, || format!("famo weights sum off by {worst:e}"))?;
    within(start, Duration::from_secs(30), "weighting")?;
    Ok(format!("teacherdrop {:.4}/{:.4}/{:.4} vs 0.5714; famo on the simplex (off by {worst:.0e}), uniform under equal losses", freq[0], freq[1], freq[2]))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into())),
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = guarded(f);
        let secs = start.elapsed().as_secs_f64();
        let status = if r.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &r {
            Ok(s) | Err(s) => s.clone(),
        };
        println!("[{status}] criterion {n:>2} {name} ({secs:.1} s): {detail}");
        results.push((n, name, r, secs));
    };

    record(1, "gradient suite", &mut gradient_suite);
    record(2, "loss identities", &mut loss_identities);
    record(4, "init equivalence", &mut init_equivalence);
    record(10, "weighting strategies", &mut weighting);
    record(8, "determinism and persistence", &mut || determinism(&root.join("det")));

    // One default 300-step run serves preservation and convergence.
    let default_run = root.join("default");
    let started = Instant::now();
    let trained = kpu_ok(&["train", "--out", p(&default_run)]).map(|_| started.elapsed());
    let shared = |t: &Result<Duration, String>| -> Result<(), String> {
        let t = t.clone()?;
        ensure(t < Duration::from_secs(180), || format!("300-step run took {:.1} s", t.as_secs_f64()))
    };
    record(3, "knowledge preservation", &mut || {
        shared(&trained)?;
        preservation(&default_run)
    });
    record(9, "convergence", &mut || {
        shared(&trained)?;
        convergence(&default_run)
    });

    // One 1000-step KPU run (plus the Base_a comparison) serves the gap and
    // balanced-transfer criteria.
    let kpu_run = root.join("kpu1000");
    let base_a_run = root.join("base_a1000");
    let started = Instant::now();
    let long = (|| -> Result<(GapReport, f64), String> {
        kpu_ok(&["train", "--out", p(&kpu_run), "-O", "steps=1000"])?;
        kpu_ok(&["analyze", "--out", p(&kpu_run)])?;
        let report: GapReport = serde_json::from_slice(&std::fs::read(kpu_run.join("gaps.json")).unwrap()).map_err(|e| e.to_string())?;
        let untrained = analyze(&Trainer::<f32>::new(TrainConfig { steps: 1000, ..Default::default() }).unwrap(), 256).map_err(|e| e.to_string())?;
        kpu_ok(&[
            "train",
            "--out",
            p(&base_a_run),
            "-O",
            "steps=1000",
            "-O",
            r#"ablation={"preservation_on":false,"unification_on":false,"reconstruction_on":false}"#,
        ])?;
        Ok((report, untrained.unified.gap.ratio))
    })();
    let elapsed = started.elapsed();
    record(5, "unification gap reduction", &mut || {
        let (report, untrained) = long.clone()?;
        within(started, Duration::from_secs(600), "1000-step runs")?;
        gap_reduction(&report, untrained)
    });
    record(6, "balanced transfer", &mut || {
        long.clone()?;
        ensure(elapsed < Duration::from_secs(600), || format!("1000-step runs took {:.0} s", elapsed.as_secs_f64()))?;
        balanced_transfer(&kpu_run, &base_a_run)
    });

    record(7, "ablation harness", &mut || ablation_structure(&root.join("ablate")));

    results.sort_by_key(|r| r.0);
    println!();
    for (n, name, r, secs) in &results {
        println!("criterion {n:>2} {:<28} {} ({secs:.1} s)", name, if r.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
