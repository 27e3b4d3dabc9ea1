use kpu_core::data::{generate_batch, SyntheticDataConfig};
use kpu_core::nn::bilinear_resize;
use kpu_core::objective::{l_align, LossWeights};
use kpu_core::student::{select_scale, StudentConfig, StudentModel, TrainPolicy};
use kpu_core::teacher::{build_teacher, default_zoo, sentinel_init_student, Teacher};
use kpu_core::{FeatureSet, ParamStore, SpaceTag, Tape, Tensor};
use proptest::prelude::*;

fn setup(identity: bool) -> (StudentModel, ParamStore<f32>, Vec<Teacher<f32>>) {
    let zoo = default_zoo();
    let teachers: Vec<Teacher<f32>> = zoo.iter().map(|s| build_teacher(s).unwrap()).collect();
    let mut store = ParamStore::new();
    let model = StudentModel::new(&mut store, &StudentConfig::default(), &zoo, 0, identity).unwrap();
    sentinel_init_student(&teachers[0], &model, &mut store).unwrap();
    (model, store, teachers)
}

fn images(n: usize) -> Vec<Tensor<f32>> {
    generate_batch(&SyntheticDataConfig::default(), 99, 0, n).unwrap()
}

#[test]
fn default_shapes() {
    let (model, store, _) = setup(false);
    let mut tape = Tape::new();
    let x = tape.constant(&images(1)[0]);
    let out = model.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(out.canonical.grid), &[4, 4, 64]);
    assert_eq!(tape.shape(out.canonical.global.unwrap()), &[64]);
    assert_eq!(out.canonical.space, SpaceTag::Student);
    let shapes: Vec<_> = out.multiscale.iter().map(|&(s, g)| (s, tape.shape(g).to_vec())).collect();
    assert_eq!(shapes, vec![(8, vec![4, 4, 64]), (16, vec![2, 2, 64]), (32, vec![1, 1, 64])]);
}

#[test]
fn zero_gates_reproduce_the_sentinel_bit_exactly() {
    let (model, store, teachers) = setup(false);
    for image in images(16) {
        let expected = teachers[0].forward(&image).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&image);
        let out = model.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(out.canonical.grid), expected.grid.data());
        assert_eq!(tape.value(out.canonical.global.unwrap()), expected.global.unwrap().data());
    }
}

#[test]
fn identity_heads_give_zero_sentinel_loss() {
    let (model, store, teachers) = setup(true);
    let w = LossWeights::default();
    for image in images(4) {
        let target = teachers[0].forward(&image).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&image);
        let out = model.forward(&mut tape, &store, x).unwrap();
        let pred = model.project_s2t(&mut tape, &store, "sentinel", &out).unwrap();
        let t = FeatureSet::constant(&mut tape, &target, SpaceTag::Teacher("sentinel".into())).unwrap();
        let l = l_align(&mut tape, &pred, &t, &w).unwrap();
        assert!(tape.item(l) < 1e-6, "{}", tape.item(l));
    }
}

#[test]
fn identical_images_give_identical_outputs() {
    let (model, store, _) = setup(false);
    let image = &images(1)[0];
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let out = model.forward(&mut tape, &store, x).unwrap();
        out.multiscale.iter().map(|&(_, g)| tape.value(g).to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn closest_scale_by_token_count() {
    assert_eq!(select_scale(&[(4, 4), (2, 2), (1, 1)], (3, 3)), Some(1));
    // 2×2 and 4×4 are both 6 tokens away from 10 (not square): tie goes larger.
    assert_eq!(select_scale(&[(2, 2), (4, 4)], (2, 5)), Some(1));
    assert_eq!(select_scale(&[], (2, 2)), None);
}

proptest! {
    #[test]
    fn selection_matches_enumeration(grids in proptest::collection::vec((1usize..6, 1usize..6), 1..5), th in 1usize..8, tw in 1usize..8) {
        let pick = select_scale(&grids, (th, tw)).unwrap();
        let cost = |(h, w): (usize, usize)| (h * w).abs_diff(th * tw);
        for &g in &grids {
            prop_assert!(cost(grids[pick]) <= cost(g));
            if cost(g) == cost(grids[pick]) {
                prop_assert!(grids[pick].0 * grids[pick].1 >= g.0 * g.1);
            }
        }
    }
}

#[test]
fn s2t_at_matching_size_skips_resizing() {
    let (model, store, _) = setup(false);
    let mut tape = Tape::new();
    let x = tape.constant(&images(1)[0]);
    let out = model.forward(&mut tape, &store, x).unwrap();
    // clip-like is 2×2: the stride-16 map is used as is.
    let grid = out.multiscale[1].1;
    assert_eq!(bilinear_resize(&mut tape, grid, (2, 2)).unwrap(), grid);
    let p = model.project_s2t(&mut tape, &store, "clip-like", &out).unwrap();
    assert_eq!(tape.shape(p.grid), &[2, 2, 48]);
    assert!(p.global.is_some());
    let q = model.project_s2t(&mut tape, &store, "detector-like", &out).unwrap();
    assert_eq!(tape.shape(q.grid), &[8, 8, 96]);
    assert!(q.global.is_none());
    assert!(model.project_s2t(&mut tape, &store, "nobody", &out).is_err());
}

fn teacher_set(tape: &mut Tape<f32>, id: &str, h: usize, w: usize, d: usize, global: bool) -> FeatureSet {
    let grid = tape.constant(&Tensor::from_fn(&[h, w, d], |i| ((i * 7 % 13) as f32 - 6.0) / 4.0).unwrap());
    let g = global.then(|| tape.constant(&Tensor::from_fn(&[d], |i| i as f32 * 0.1 - 1.0).unwrap()));
    FeatureSet::new(tape, g, grid, SpaceTag::Teacher(id.into())).unwrap()
}

#[test]
fn t2s_is_resize_then_head() {
    let (model, store, _) = setup(false);
    let head = model.head("clip-like").unwrap().t2s;
    let mut tape = Tape::new();
    let fs = teacher_set(&mut tape, "clip-like", 2, 2, 48, true);
    let u = model.project_t2s(&mut tape, &store, "clip-like", &fs, (4, 4)).unwrap();
    assert_eq!(u.space, SpaceTag::Unified);

    let resized = bilinear_resize(&mut tape, fs.grid, (4, 4)).unwrap();
    let oracle = head.forward(&mut tape, &store, resized).unwrap();
    for (a, b) in tape.value(u.grid).iter().zip(tape.value(oracle)) {
        assert!((a - b).abs() < 1e-6);
    }
    let og = head.forward(&mut tape, &store, fs.global.unwrap()).unwrap();
    assert_eq!(tape.value(u.global.unwrap()), tape.value(og));
}

#[test]
fn t2s_rejects_other_spaces() {
    let (model, store, _) = setup(false);
    let mut tape = Tape::new();
    let fs = teacher_set(&mut tape, "clip-like", 2, 2, 48, true);
    assert!(model.project_t2s(&mut tape, &store, "detector-like", &fs, (4, 4)).is_err());
    assert!(model.reconstruct(&mut tape, &store, "clip-like", &fs, (2, 2)).is_err());
}

#[test]
fn zero_features_with_zero_bias_heads_stay_zero() {
    let (model, mut store, _) = setup(false);
    let h = model.head("clip-like").unwrap().clone();
    for head in [h.t2s, h.rec] {
        for b in [head.fc1.bias, head.fc2.bias] {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::new();
    let grid = tape.constant(&Tensor::zeros(&[2, 2, 48]).unwrap());
    let fs = FeatureSet::new(&tape, None, grid, SpaceTag::Teacher("clip-like".into())).unwrap();
    let u = model.project_t2s(&mut tape, &store, "clip-like", &fs, (4, 4)).unwrap();
    assert!(tape.value(u.grid).iter().all(|&v| v == 0.0));
    let r = model.reconstruct(&mut tape, &store, "clip-like", &u, (2, 2)).unwrap();
    assert!(tape.value(r.grid).iter().all(|&v| v == 0.0));
}

#[test]
fn rec_is_head_then_resize() {
    let (model, store, _) = setup(false);
    let head = model.head("detector-like").unwrap().rec;
    let mut tape = Tape::new();
    let grid = tape.constant(&Tensor::from_fn(&[4, 4, 64], |i| (i as f32 * 0.013).sin()).unwrap());
    let u = FeatureSet::new(&tape, None, grid, SpaceTag::Unified).unwrap();
    let r = model.reconstruct(&mut tape, &store, "detector-like", &u, (8, 8)).unwrap();
    assert_eq!(r.space, SpaceTag::Teacher("detector-like".into()));
    let mapped = head.forward(&mut tape, &store, grid).unwrap();
    let oracle = bilinear_resize(&mut tape, mapped, (8, 8)).unwrap();
    for (a, b) in tape.value(r.grid).iter().zip(tape.value(oracle)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn identity_t2s_and_rec_invert_each_other() {
    let (model, store, _) = setup(true);
    let mut tape = Tape::new();
    let fs = teacher_set(&mut tape, "sentinel", 4, 4, 64, true);
    let u = model.project_t2s(&mut tape, &store, "sentinel", &fs, (4, 4)).unwrap();
    let r = model.reconstruct(&mut tape, &store, "sentinel", &u, (4, 4)).unwrap();
    for (a, b) in tape.value(r.grid).iter().zip(tape.value(fs.grid)) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in tape.value(r.global.unwrap()).iter().zip(tape.value(fs.global.unwrap())) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn policies() {
    let (model, mut store, _) = setup(false);
    let on = model.trainable_parameters(&store, TrainPolicy { preservation_on: true });
    let off = model.trainable_parameters(&store, TrainPolicy { preservation_on: false });
    assert!(on.iter().all(|id| off.contains(id)));
    assert!(off.len() > on.len());
    assert!(on.iter().all(|&id| !store.name(id).starts_with("backbone.")));
    assert!(off.iter().any(|&id| store.name(id).starts_with("backbone.")));
    assert!(on.iter().any(|&id| store.name(id).starts_with("adapter.spm.")));
    assert!(on.iter().any(|&id| store.name(id).starts_with("heads.clip-like.t2s.")));

    let before = store.fingerprint("");
    model.apply_policy(&mut store, TrainPolicy { preservation_on: false });
    model.apply_policy(&mut store, TrainPolicy { preservation_on: true });
    assert_eq!(store.fingerprint(""), before);
    for id in store.ids() {
        assert_eq!(store.get(id).requires_grad(), on.contains(&id), "{}", store.name(id));
    }
}

#[test]
fn removing_a_teachers_heads_leaves_others_unchanged() {
    let zoo = default_zoo();
    let mut full = ParamStore::<f32>::new();
    let model = StudentModel::new(&mut full, &StudentConfig::default(), &zoo, 3, false).unwrap();
    let mut less = ParamStore::<f32>::new();
    let fewer: Vec<_> = zoo.iter().filter(|t| t.id != "clip-like").cloned().collect();
    StudentModel::new(&mut less, &StudentConfig::default(), &fewer, 3, false).unwrap();
    for id in less.ids() {
        let name = less.name(id);
        assert_eq!(less.get(id).data(), full.get(full.find(name).unwrap()).data(), "{name}");
    }
    assert!(model.head("clip-like").is_ok());
}
