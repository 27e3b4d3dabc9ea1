//! Feature statistics: streaming variance, distribution gaps, alignment.

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::features::FeatureValues;
use crate::objective::cos_loss;
use crate::student::StudentModel;
use crate::teacher::Teacher;
use crate::{Error, FeatureSet, ParamStore, Result, Scalar, SpaceTag, Tape, Tensor};

/// Single-pass mean and population variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }

    pub fn std(&self) -> f64 {
        Float::sqrt(self.variance())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatSpace {
    Native,
    Unified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub teacher: String,
    pub space: StatSpace,
    /// Number of feature sets consumed.
    pub samples: u64,
    /// Per-channel mean and standard deviation over all grid positions.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Standard deviation over every grid element.
    pub pooled_std: f64,
}

/// Pooled and per-channel statistics of the grids in `features`.
pub fn feature_stats<'a, S: Scalar + 'a>(
    teacher: &str,
    space: StatSpace,
    features: impl IntoIterator<Item = &'a FeatureValues<S>>,
) -> Result<DistributionStats> {
    let mut pooled = Welford::default();
    let mut channels: Vec<Welford> = Vec::new();
    let mut samples = 0;
    for fv in features {
        let d = fv.dim();
        if channels.is_empty() {
            channels = alloc::vec![Welford::default(); d];
        } else if channels.len() != d {
            return Err(Error::ShapeMismatch { op: "feature-stats", lhs: alloc::vec![channels.len()], rhs: alloc::vec![d] });
        }
        for row in fv.grid.data().chunks(d) {
            for (c, &v) in channels.iter_mut().zip(row) {
                let v = v.as_f64();
                c.push(v);
                pooled.push(v);
            }
        }
        samples += 1;
    }
    if samples < 2 {
        return Err(Error::InvalidConfig(alloc::format!("feature stats for `{teacher}` need at least 2 samples")));
    }
    Ok(DistributionStats {
        teacher: teacher.into(),
        space,
        samples,
        mean: channels.iter().map(|c| c.mean).collect(),
        std: channels.iter().map(|c| c.std()).collect(),
        pooled_std: pooled.std(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRatio {
    /// `max / min` pooled std; infinite when the minimum is zero.
    pub ratio: f64,
    pub zero_std: bool,
}

pub fn gap_ratio(stats: &[DistributionStats]) -> Result<GapRatio> {
    if stats.len() < 2 {
        return Err(Error::InvalidConfig("gap ratio needs at least two teachers".into()));
    }
    if stats.iter().any(|s| s.space != stats[0].space) {
        return Err(Error::InvalidConfig("gap ratio over mixed spaces".into()));
    }
    let max = stats.iter().map(|s| s.pooled_std).fold(f64::NEG_INFINITY, f64::max);
    let min = stats.iter().map(|s| s.pooled_std).fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Ok(GapRatio { ratio: f64::INFINITY, zero_std: true });
    }
    Ok(GapRatio { ratio: max / min, zero_std: false })
}

/// Mean per-position cosine similarity between the student's projection
/// into `teacher`'s space and the teacher's own grid, over `images`.
pub fn alignment_quality<S: Scalar>(
    model: &StudentModel,
    store: &ParamStore<S>,
    teacher: &Teacher<S>,
    images: &[Tensor<S>],
) -> Result<f64> {
    let id = teacher.spec.id.as_str();
    let mut total = 0.0;
    for image in images {
        let target = teacher.forward(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let out = model.forward(&mut tape, store, x)?;
        let pred = model.project_s2t(&mut tape, store, id, &out)?;
        let t = FeatureSet::constant(&mut tape, &target, SpaceTag::Teacher(id.into()))?;
        let l = cos_loss(&mut tape, pred.grid, t.grid, 1e-8)?;
        total += 1.0 - tape.item(l).as_f64();
    }
    Ok(total / images.len().max(1) as f64)
}

/// Unified-space features `h_t2s(X^t)` of a teacher on `images`.
pub fn unified_features<S: Scalar>(
    model: &StudentModel,
    store: &ParamStore<S>,
    teacher: &Teacher<S>,
    images: &[Tensor<S>],
) -> Result<Vec<FeatureValues<S>>> {
    let id = teacher.spec.id.as_str();
    images
        .iter()
        .map(|image| {
            let native = teacher.forward(image)?;
            let mut tape = Tape::new();
            let t = FeatureSet::constant(&mut tape, &native, SpaceTag::Teacher(id.into()))?;
            let u = model.project_t2s(&mut tape, store, id, &t, model.grid_hw())?;
            Ok(u.values(&tape))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: Vec<f64>, d: usize) -> FeatureValues<f64> {
        let n = values.len() / d;
        FeatureValues { global: None, grid: Tensor::new(&[1, n, d], values).unwrap() }
    }

    fn stats(t: &str, pooled: f64) -> DistributionStats {
        DistributionStats { teacher: t.into(), space: StatSpace::Native, samples: 2, mean: Vec::new(), std: Vec::new(), pooled_std: pooled }
    }

    #[test]
    fn constant_features_have_zero_std() {
        let xs = [fv(alloc::vec![3.0; 4], 2), fv(alloc::vec![3.0; 4], 2)];
        assert_eq!(feature_stats("a", StatSpace::Native, &xs).unwrap().pooled_std, 0.0);
    }

    #[test]
    fn plus_minus_one_has_unit_std() {
        let xs = [fv(alloc::vec![-1.0, 1.0], 1), fv(alloc::vec![1.0, -1.0], 1)];
        let s = feature_stats("a", StatSpace::Native, &xs).unwrap();
        assert!((s.pooled_std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn one_sample_is_not_enough() {
        let xs = [fv(alloc::vec![1.0, 2.0], 1)];
        assert!(feature_stats("a", StatSpace::Native, &xs).is_err());
    }

    #[test]
    fn ratios() {
        assert_eq!(gap_ratio(&[stats("a", 2.0), stats("b", 2.0)]).unwrap().ratio, 1.0);
        assert!((gap_ratio(&[stats("a", 0.1), stats("b", 3.34)]).unwrap().ratio - 33.4).abs() < 1e-9);
        let z = gap_ratio(&[stats("a", 0.0), stats("b", 1.0)]).unwrap();
        assert!(z.zero_std && z.ratio.is_infinite());
        assert!(gap_ratio(&[stats("a", 1.0)]).is_err());
    }
}
