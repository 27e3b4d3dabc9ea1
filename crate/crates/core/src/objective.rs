//! Alignment losses and the combined objective.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::features::FeatureValues;
use crate::student::{StudentModel, StudentOutput};
use crate::{Error, FeatureSet, ParamStore, Result, Scalar, SpaceTag, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Global-feature cosine weight.
    pub lambda1: f64,
    /// Grid cosine weight.
    pub lambda2: f64,
    /// Grid smooth-L1 weight.
    pub lambda3: f64,
    /// Reconstruction weight in the total.
    pub lambda: f64,
    pub smooth_l1_beta: f64,
    /// Rows whose norm falls below this count as degenerate in the cosine.
    pub cos_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.9, lambda3: 0.1, lambda: 1.0, smooth_l1_beta: 1.0, cos_eps: 1e-8 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda, self.smooth_l1_beta, self.cos_eps];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) || self.smooth_l1_beta <= 0.0 {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative, beta positive".into()));
        }
        Ok(())
    }
}

/// Mean over trailing-axis rows of `1 − cos`.
pub fn cos_loss<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var, eps: f64) -> Result<Var> {
    tape.cosine_loss(a, b, S::of(eps))
}

pub fn smooth_l1<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var, beta: f64) -> Result<Var> {
    tape.smooth_l1(a, b, S::of(beta))
}

/// `λ1·cos(x, x') + λ2·cos(V, V') + λ3·smoothL1(V, V')`; the global term is
/// dropped when either side has no global feature.
pub fn l_align<S: Scalar>(tape: &mut Tape<S>, pred: &FeatureSet, target: &FeatureSet, w: &LossWeights) -> Result<Var> {
    target.expect_space(&pred.space)?;
    if tape.shape(pred.grid) != tape.shape(target.grid) {
        return Err(Error::ShapeMismatch {
            op: "l-align",
            lhs: tape.shape(pred.grid).to_vec(),
            rhs: tape.shape(target.grid).to_vec(),
        });
    }
    let c = cos_loss(tape, pred.grid, target.grid, w.cos_eps)?;
    let mut total = tape.scale(c, S::of(w.lambda2))?;
    let l1 = smooth_l1(tape, pred.grid, target.grid, w.smooth_l1_beta)?;
    let l1 = tape.scale(l1, S::of(w.lambda3))?;
    total = tape.add(total, l1)?;
    if let (Some(a), Some(b)) = (pred.global, target.global) {
        let g = cos_loss(tape, a, b, w.cos_eps)?;
        let g = tape.scale(g, S::of(w.lambda1))?;
        total = tape.add(g, total)?;
    }
    Ok(total)
}

/// `L_t2s + L_s2t + λ·L_rec`.
pub fn l_total<S: Scalar>(tape: &mut Tape<S>, s2t: Var, t2s: Option<Var>, rec: Option<Var>, lambda: f64) -> Result<Var> {
    let mut total = s2t;
    if let Some(t) = t2s {
        total = tape.add(t, total)?;
    }
    if let Some(r) = rec {
        let r = tape.scale(r, S::of(lambda))?;
        total = tape.add(total, r)?;
    }
    Ok(total)
}

/// Which loss families are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub unification: bool,
    pub reconstruction: bool,
}

/// One teacher's terms for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeacherTerms {
    pub s2t: Var,
    pub t2s: Option<Var>,
    pub rec: Option<Var>,
}

/// All enabled terms between the student output on an image and teacher
/// `id`'s features of the same image. Teacher features enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn teacher_terms<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    model: &StudentModel,
    id: &str,
    out: &StudentOutput,
    teacher: &FeatureValues<S>,
    flags: LossFlags,
    w: &LossWeights,
) -> Result<TeacherTerms> {
    let space = SpaceTag::Teacher(id.to_string());
    let target = FeatureSet::constant(tape, teacher, space)?;
    let pred = model.project_s2t(tape, store, id, out)?;
    let s2t = l_align(tape, &pred, &target, w)?;
    let needs_t2s = flags.unification || flags.reconstruction;
    let unified = if needs_t2s {
        Some(model.project_t2s(tape, store, id, &target, out.canonical.hw())?)
    } else {
        None
    };
    let t2s = match (&unified, flags.unification) {
        (Some(u), true) => {
            let student = out.canonical.as_unified()?;
            // The global term follows the same rule as in the s2t direction.
            let student = FeatureSet { global: if u.global.is_some() { student.global } else { None }, ..student };
            Some(l_align(tape, &student, u, w)?)
        }
        _ => None,
    };
    let rec = match (&unified, flags.reconstruction) {
        (Some(u), true) => {
            let back = model.reconstruct(tape, store, id, u, target.hw())?;
            Some(l_align(tape, &target, &back, w)?)
        }
        _ => None,
    };
    Ok(TeacherTerms { s2t, t2s, rec })
}

/// Per-teacher entry of a [`LossBreakdown`]. Disabled terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherLoss {
    pub s2t: f64,
    pub t2s: Option<f64>,
    pub rec: Option<f64>,
    pub weight: f64,
}

impl TeacherLoss {
    /// `s2t + t2s + λ·rec`, unweighted.
    pub fn total(&self, lambda: f64) -> f64 {
        self.s2t + self.t2s.unwrap_or(0.0) + lambda * self.rec.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTotals {
    pub s2t: f64,
    pub t2s: f64,
    pub rec: f64,
    pub kpu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub teachers: BTreeMap<String, TeacherLoss>,
    pub totals: LossTotals,
}

impl LossBreakdown {
    /// Totals as weighted sums of the per-teacher entries.
    pub fn from_teachers(teachers: BTreeMap<String, TeacherLoss>, lambda: f64) -> Self {
        let (mut s2t, mut t2s, mut rec) = (0.0, 0.0, 0.0);
        for t in teachers.values() {
            s2t += t.weight * t.s2t;
            t2s += t.weight * t.t2s.unwrap_or(0.0);
            rec += t.weight * t.rec.unwrap_or(0.0);
        }
        let kpu = t2s + s2t + lambda * rec;
        Self { teachers, totals: LossTotals { s2t, t2s, rec, kpu } }
    }

    pub fn teacher_totals(&self, lambda: f64) -> Vec<f64> {
        self.teachers.values().map(|t| t.total(lambda)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn fs(tape: &mut Tape<f64>, h: usize, w: usize, d: usize, global: bool, f: impl Fn(usize) -> f64, space: SpaceTag) -> FeatureSet {
        let grid = tape.constant(&Tensor::from_fn(&[h, w, d], &f).unwrap());
        let g = global.then(|| tape.constant(&Tensor::from_fn(&[d], |i| f(i + 1000)).unwrap()));
        FeatureSet::new(tape, g, grid, space).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::new(&[2], alloc::vec![1.0, 0.0]).unwrap());
        let b = tape.constant(&Tensor::new(&[2], alloc::vec![0.0, 3.0]).unwrap());
        let na = tape.constant(&Tensor::new(&[2], alloc::vec![-2.0, 0.0]).unwrap());
        let z = tape.constant(&Tensor::new(&[2], alloc::vec![0.0, 0.0]).unwrap());
        for (x, y, e) in [(a, a, 0.0), (a, b, 1.0), (a, na, 2.0), (a, z, 1.0)] {
            let l = cos_loss(&mut tape, x, y, 1e-8).unwrap();
            assert!((tape.item(l) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(&Tensor::scalar(0.0));
        for (d, e) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
            let x = tape.constant(&Tensor::scalar(d));
            let l = smooth_l1(&mut tape, x, zero, 1.0).unwrap();
            assert_eq!(tape.item(l), e);
        }
    }

    #[test]
    fn align_of_identical_sets_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = fs(&mut tape, 2, 3, 4, true, |i| (i as f64).sin() + 0.1, SpaceTag::Unified);
        let l = l_align(&mut tape, &x, &x.clone(), &LossWeights::default()).unwrap();
        assert!(tape.item(l).abs() < 1e-15);
    }

    #[test]
    fn align_rejects_cross_space_pairs() {
        let mut tape = Tape::<f64>::new();
        let x = fs(&mut tape, 1, 1, 2, false, |_| 1.0, SpaceTag::Unified);
        let y = fs(&mut tape, 1, 1, 2, false, |_| 1.0, SpaceTag::Teacher("a".into()));
        assert!(matches!(l_align(&mut tape, &x, &y, &LossWeights::default()), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn anti_aligned_grids_without_globals() {
        let mut tape = Tape::<f64>::new();
        let w = LossWeights::default();
        let x = fs(&mut tape, 2, 2, 1, false, |_| 1.0, SpaceTag::Unified);
        let y = fs(&mut tape, 2, 2, 1, true, |_| -1.0, SpaceTag::Unified);
        let l = l_align(&mut tape, &x, &y, &w).unwrap();
        // |d| = 2 ≥ β, so smooth-L1 = 2 − 0.5.
        assert!((tape.item(l) - (0.9 * 2.0 + 0.1 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn align_matches_term_oracle() {
        let mut tape = Tape::<f64>::new();
        let w = LossWeights::default();
        let x = fs(&mut tape, 2, 3, 5, true, |i| ((i * 37 % 17) as f64 - 8.0) * 0.3, SpaceTag::Unified);
        let y = fs(&mut tape, 2, 3, 5, true, |i| ((i * 11 % 13) as f64 - 6.0) * 0.7, SpaceTag::Unified);
        let got = {
            let l = l_align(&mut tape, &x, &y, &w).unwrap();
            tape.item(l)
        };
        let (gx, gy) = (tape.value(x.grid).to_vec(), tape.value(y.grid).to_vec());
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let na = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nb = b.iter().map(|p| p * p).sum::<f64>().sqrt();
            1.0 - dot / (na * nb)
        };
        let grid_cos: f64 = gx.chunks(5).zip(gy.chunks(5)).map(|(a, b)| cos(a, b)).sum::<f64>() / 6.0;
        let l1: f64 = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d < 1.0 { 0.5 * d * d } else { d - 0.5 }
            })
            .sum::<f64>()
            / 30.0;
        let glob = cos(tape.value(x.global.unwrap()), tape.value(y.global.unwrap()));
        let expect = glob + 0.9 * grid_cos + 0.1 * l1;
        assert!((got - expect).abs() < 1e-7);
    }

    #[test]
    fn total_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let v = |tape: &mut Tape<f64>, x: f64| tape.constant(&Tensor::scalar(x));
        let (a, b, c) = (v(&mut tape, 0.3), v(&mut tape, 0.2), v(&mut tape, 0.4));
        let t = l_total(&mut tape, a, Some(b), Some(c), 1.0).unwrap();
        assert!((tape.item(t) - 0.9).abs() < 1e-15);
        let t = l_total(&mut tape, a, Some(b), Some(c), 0.0).unwrap();
        assert!((tape.item(t) - 0.5).abs() < 1e-15);
        let z = v(&mut tape, 0.0);
        let t = l_total(&mut tape, z, Some(z), Some(z), 1.0).unwrap();
        assert_eq!(tape.item(t), 0.0);
    }

    #[test]
    fn breakdown_totals_are_weighted_sums() {
        let mut m = BTreeMap::new();
        m.insert("a".into(), TeacherLoss { s2t: 0.5, t2s: Some(0.25), rec: Some(1.0), weight: 0.5 });
        m.insert("b".into(), TeacherLoss { s2t: 1.5, t2s: Some(0.75), rec: None, weight: 0.5 });
        let b = LossBreakdown::from_teachers(m, 1.0);
        assert_eq!(b.totals.s2t, 1.0);
        assert_eq!(b.totals.t2s, 0.5);
        assert_eq!(b.totals.rec, 0.5);
        assert_eq!(b.totals.kpu, 2.0);
    }
}
