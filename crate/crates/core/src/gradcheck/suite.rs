//! The standard gradient suite: every tape operator, every layer, and the
//! full multi-teacher objective on a toy model.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{grad_check, GradCheckOptions, GradCheckReport};
use crate::autodiff::PAD;
use crate::nn::{bilinear_resize, Conv2d, CrossAttentionBlock, LayerNorm, Layout, Linear, MlpHead, PatchEmbed, TransformerBlock};
use crate::rng::{counter_rng, domain, StreamRng};
use crate::student::{AdapterConfig, BackboneConfig, StudentConfig};
use crate::teacher::{TeacherArch, TeacherSpec};
use crate::trainer::{TrainConfig, Trainer};
use crate::data::SyntheticDataConfig;
use crate::{ParamId, ParamStore, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: String,
    pub report: GradCheckReport,
}

type Loss = Box<dyn FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    store: ParamStore<f64>,
    loss: Loss,
}

fn rng(tag: &str) -> StreamRng {
    counter_rng(0x6772_6164, domain(tag), 0)
}

fn random(r: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi)).unwrap()
}

/// Values bounded away from zero, with random signs.
fn away_from_zero(r: &mut StreamRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.random_range(0.1..1.5);
        if r.random::<bool>() { m } else { -m }
    })
    .unwrap()
}

fn input(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> ParamId {
    store.register(name, t.with_requires_grad(true)).unwrap()
}

/// Reduces `v` to a scalar through a fixed random weighting, so every
/// output entry carries a distinct upstream gradient.
fn probe(tape: &mut Tape<f64>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut r = counter_rng(1, domain("probe"), shape.iter().product::<usize>() as u64);
    let w = tape.constant(&random(&mut r, &shape, -1.0, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn unary_case(name: &'static str, t: Tensor<f64>, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Case {
    let mut store = ParamStore::new();
    let a = input(&mut store, "a", t);
    Case {
        name,
        store,
        loss: Box::new(move |tape, s| {
            let a = tape.param(s, a);
            let y = op(tape, a)?;
            probe(tape, y)
        }),
    }
}

fn binary_case(name: &'static str, a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Case {
    let mut store = ParamStore::new();
    let (a, b) = (input(&mut store, "a", a), input(&mut store, "b", b));
    Case {
        name,
        store,
        loss: Box::new(move |tape, s| {
            let (a, b) = (tape.param(s, a), tape.param(s, b));
            let y = op(tape, a, b)?;
            if tape.shape(y) == [1] {
                Ok(y)
            } else {
                probe(tape, y)
            }
        }),
    }
}

fn op_cases() -> Vec<Case> {
    let mut r = rng("ops");
    let big = [4, 8, 8, 16];
    vec![
        binary_case("matmul", random(&mut r, &[2, 3, 4], -1.0, 1.0), random(&mut r, &[4, 5], -1.0, 1.0), |t, a, b| t.matmul(a, b)),
        binary_case("matmul-transposed", random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[5, 4], -1.0, 1.0), |t, a, b| {
            t.matmul_t(a, b)
        }),
        binary_case("add", random(&mut r, &big, -1.0, 1.0), random(&mut r, &big, -1.0, 1.0), |t, a, b| t.add(a, b)),
        binary_case("sub", random(&mut r, &big, -1.0, 1.0), random(&mut r, &big, -1.0, 1.0), |t, a, b| t.sub(a, b)),
        binary_case("mul", random(&mut r, &big, -1.0, 1.0), random(&mut r, &big, -1.0, 1.0), |t, a, b| t.mul(a, b)),
        unary_case("scale", random(&mut r, &[3, 4], -1.0, 1.0), |t, a| t.scale(a, -1.7)),
        binary_case("scalar-mul", random(&mut r, &[3, 4], -1.0, 1.0), random(&mut r, &[1], 0.2, 1.0), |t, a, s| t.mul_scalar(a, s)),
        unary_case("mean", random(&mut r, &[4, 8, 16], -1.0, 1.0), |t, a| t.mean(a)),
        unary_case("sum", random(&mut r, &[4, 8, 16], -1.0, 1.0), |t, a| t.sum(a)),
        binary_case("concat", random(&mut r, &[2, 3, 4], -1.0, 1.0), random(&mut r, &[2, 2, 4], -1.0, 1.0), |t, a, b| {
            t.concat(&[a, b, a], 1)
        }),
        unary_case("reshape", random(&mut r, &[2, 3, 4], -1.0, 1.0), |t, a| t.reshape(a, &[6, 4])),
        unary_case("transpose", random(&mut r, &[3, 5], -1.0, 1.0), |t, a| t.transpose(a)),
        unary_case("softmax", random(&mut r, &[4, 7], -2.0, 2.0), |t, a| t.softmax(a)),
        unary_case("gelu", random(&mut r, &big, -3.0, 3.0), |t, a| t.gelu(a)),
        unary_case("relu", away_from_zero(&mut r, &big), |t, a| t.relu(a)),
        unary_case("layer-norm", random(&mut r, &[4, 8, 16], -2.0, 2.0), |t, a| t.layer_norm(a, 1e-5)),
        unary_case("sqrt", random(&mut r, &big, 0.2, 2.0), |t, a| t.sqrt(a)),
        unary_case("square", random(&mut r, &big, -2.0, 2.0), |t, a| t.square(a)),
        unary_case("broadcast", random(&mut r, &[8, 16], -1.0, 1.0), |t, a| t.broadcast(a, &[4, 8, 8, 16])),
        unary_case("narrow", random(&mut r, &[3, 6, 2], -1.0, 1.0), |t, a| t.narrow(a, 1, 2, 3)),
        unary_case("gather", random(&mut r, &[3, 4], -1.0, 1.0), |t, a| {
            let index: Arc<[u32]> = vec![0, 5, PAD, 11, 5, 2, PAD, 7].into();
            t.gather(a, index, &[2, 4])
        }),
        // Differences straddle beta on both sides but stay clear of the kink.
        binary_case(
            "smooth-l1",
            Tensor::from_fn(&[4, 8], |i| [0.3, -0.4, 2.5, -3.0][i % 4] + 0.01 * i as f64).unwrap(),
            Tensor::from_fn(&[4, 8], |i| 0.002 * i as f64).unwrap(),
            |t, a, b| t.smooth_l1(a, b, 1.0),
        ),
        binary_case("cosine", away_from_zero(&mut r, &[4, 8, 16]), away_from_zero(&mut r, &[4, 8, 16]), |t, a, b| {
            t.cosine_loss(a, b, 1e-8)
        }),
    ]
}

fn layer_case(name: &'static str, build: impl FnOnce(&mut ParamStore<f64>, &mut StreamRng) -> Loss) -> Case {
    let mut store = ParamStore::new();
    let mut r = rng(name);
    let loss = build(&mut store, &mut r);
    Case { name, store, loss }
}

fn layer_cases() -> Vec<Case> {
    vec![
        layer_case("linear", |s, r| {
            let l = Linear::new(s, "l", 5, 3, r).unwrap();
            let x = input(s, "x", random(r, &[2, 4, 5], -1.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = l.forward(t, s, x)?;
                probe(t, y)
            })
        }),
        layer_case("affine-layer-norm", |s, r| {
            let l = LayerNorm::new(s, "n", 6).unwrap();
            s.get_mut(l.weight).data_mut().copy_from_slice(random(r, &[6], 0.5, 1.5).data());
            let x = input(s, "x", random(r, &[3, 6], -2.0, 2.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = l.forward(t, s, x)?;
                probe(t, y)
            })
        }),
        layer_case("mlp-head", |s, r| {
            let h = MlpHead::new(s, "h", 4, 6, None, r).unwrap();
            let x = input(s, "x", random(r, &[2, 3, 4], -1.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = h.forward(t, s, x)?;
                probe(t, y)
            })
        }),
        layer_case("cross-attention", |s, r| {
            let b = CrossAttentionBlock::new(s, "a", 8, 2, 0.7, r).unwrap();
            let q = input(s, "q", random(r, &[3, 8], -1.0, 1.0));
            let kv = input(s, "kv", random(r, &[5, 8], -1.0, 1.0));
            Box::new(move |t, s| {
                let (q, kv) = (t.param(s, q), t.param(s, kv));
                let y = b.forward(t, s, q, kv)?;
                probe(t, y)
            })
        }),
        layer_case("transformer-block", |s, r| {
            let b = TransformerBlock::new(s, "b", 8, 2, 2, r).unwrap();
            let x = input(s, "x", random(r, &[5, 8], -1.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = b.forward(t, s, x)?;
                probe(t, y)
            })
        }),
        layer_case("conv2d", |s, r| {
            let c = Conv2d::new(s, "c", 3, 4, 3, 2, r).unwrap();
            let x = input(s, "x", random(r, &[5, 6, 3], -1.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = c.forward(t, s, x, Layout::Hwc)?;
                probe(t, y)
            })
        }),
        layer_case("patch-embed", |s, r| {
            let p = PatchEmbed::new(s, "p", 3, 2, 4, r).unwrap();
            let x = input(s, "x", random(r, &[3, 4, 6], 0.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = p.forward(t, s, x)?;
                probe(t, y)
            })
        }),
        layer_case("bilinear-resize", |s, r| {
            let x = input(s, "x", random(r, &[3, 2, 4], -1.0, 1.0));
            Box::new(move |t, s| {
                let x = t.param(s, x);
                let y = bilinear_resize(t, x, (5, 4))?;
                probe(t, y)
            })
        }),
    ]
}

/// Two-teacher toy setup: a sentinel plus a detector-like teacher without
/// a global feature, 16×16 inputs, open gates and a trainable backbone so
/// that every parameter is reached.
pub fn toy_config() -> TrainConfig {
    let backbone = BackboneConfig { image_size: 16, patch_size: 4, depth: 2, dim: 8, heads: 2, mlp_ratio: 2, class_token: true };
    let adapter = AdapterConfig { blocks: 2, scales: vec![4, 8, 16], gate_init: 0.5, spm_channels: 4, fusion_stride: 8, ffn_ratio: 2 };
    let sentinel = TeacherSpec {
        id: "sentinel".into(),
        feature_dim: 8,
        grid: [4, 4],
        has_global: true,
        magnitude_scale: 1.0,
        arch: TeacherArch::TinyVit { depth: 2, heads: 2, mlp_ratio: 2 },
        seed: 3,
        input_size: [16, 16],
        batch_size: 1,
        is_sentinel: true,
    };
    let other = TeacherSpec {
        id: "dense".into(),
        feature_dim: 6,
        grid: [8, 8],
        has_global: false,
        magnitude_scale: 2.0,
        arch: TeacherArch::TinyConv { hidden: 4 },
        seed: 5,
        input_size: [16, 16],
        batch_size: 1,
        is_sentinel: false,
    };
    let mut cfg = TrainConfig {
        steps: 1,
        seed: 17,
        zoo: vec![sentinel, other],
        data: SyntheticDataConfig { image_size: [16, 16], ..Default::default() },
        student: StudentConfig { backbone, adapter, head_hidden: Some(5) },
        ..Default::default()
    };
    cfg.ablation.preservation_on = false;
    cfg
}

fn objective_case() -> Result<Case> {
    let mut trainer = Trainer::<f64>::new(toy_config())?;
    let store = core::mem::take(&mut trainer.store);
    Ok(Case {
        name: "kpu-objective",
        store,
        loss: Box::new(move |tape, s| {
            let weights = trainer.weighting.weights(0);
            Ok(trainer.build_graph(tape, s, 0, &weights)?.total)
        }),
    })
}

/// Runs every case; the full objective runs last.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<CaseReport>> {
    let mut cases = op_cases();
    cases.extend(layer_cases());
    cases.push(objective_case()?);
    cases
        .into_iter()
        .map(|mut c| {
            let report = grad_check(&mut c.store, &mut c.loss, opts)?;
            Ok(CaseReport { case: c.name.into(), report })
        })
        .collect()
}
