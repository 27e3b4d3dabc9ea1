//! Synthetic frozen teachers.
//!
//! Each teacher is a small seeded network whose final features are layer
//! normalized and then multiplied by a magnitude scale `σ`, so the pooled
//! standard deviation of its features is close to `σ` by construction.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::features::FeatureValues;
use crate::nn::{Conv2d, Layout, LN_EPS};
use crate::rng::{counter_rng, domain};
use crate::student::{BackboneConfig, StudentModel, VitBackbone};
use crate::{Error, ParamStore, Result, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TeacherArch {
    TinyVit {
        depth: usize,
        heads: usize,
        #[serde(default = "default_mlp_ratio")]
        mlp_ratio: usize,
    },
    /// Stride-2 3×3 convolutions down to the grid size, then a 1×1
    /// projection.
    TinyConv { hidden: usize },
}

fn default_mlp_ratio() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub id: String,
    pub feature_dim: usize,
    /// `[H_t, W_t]`
    pub grid: [usize; 2],
    pub has_global: bool,
    pub magnitude_scale: f64,
    pub arch: TeacherArch,
    pub seed: u64,
    /// `[H, W]` of input images.
    pub input_size: [usize; 2],
    pub batch_size: usize,
    #[serde(default)]
    pub is_sentinel: bool,
}

impl TeacherSpec {
    pub fn grid_hw(&self) -> (usize, usize) {
        (self.grid[0], self.grid[1])
    }

    /// Backbone configuration of a tiny-vit teacher.
    pub fn backbone_config(&self) -> Option<BackboneConfig> {
        match self.arch {
            TeacherArch::TinyVit { depth, heads, mlp_ratio } => Some(BackboneConfig {
                image_size: self.input_size[0],
                patch_size: self.input_size[0] / self.grid[0].max(1),
                depth,
                dim: self.feature_dim,
                heads,
                mlp_ratio,
                class_token: self.has_global,
            }),
            TeacherArch::TinyConv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("teacher `{}`: {m}", self.id)));
        if self.id.is_empty() || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad("id must be non-empty and use only [A-Za-z0-9_-]".into());
        }
        if !(self.magnitude_scale > 0.0 && self.magnitude_scale.is_finite()) {
            return bad("magnitude_scale must be positive".into());
        }
        if self.feature_dim == 0 || self.batch_size == 0 || self.grid.contains(&0) || self.input_size.contains(&0) {
            return bad("dimensions and batch size must be positive".into());
        }
        match self.arch {
            TeacherArch::TinyVit { .. } => {
                if self.input_size[0] != self.input_size[1] || self.grid[0] != self.grid[1] {
                    return bad("tiny-vit teachers need square inputs and grids".into());
                }
                self.backbone_config().unwrap().validate()
            }
            TeacherArch::TinyConv { hidden } => {
                let (sy, sx) = (self.input_size[0] / self.grid[0], self.input_size[1] / self.grid[1]);
                if hidden == 0
                    || sy != sx
                    || sy < 2
                    || !sy.is_power_of_two()
                    || sy * self.grid[0] != self.input_size[0]
                    || sx * self.grid[1] != self.input_size[1]
                {
                    return bad("tiny-conv grid must divide the input by a power-of-two stride ≥ 2".into());
                }
                Ok(())
            }
        }
    }
}

/// Checks a whole zoo: valid specs, unique ids, exactly one sentinel.
pub fn validate_zoo(zoo: &[TeacherSpec]) -> Result<()> {
    for (i, t) in zoo.iter().enumerate() {
        t.validate()?;
        if zoo[..i].iter().any(|o| o.id == t.id) {
            return Err(Error::InvalidConfig(format!("duplicate teacher id `{}`", t.id)));
        }
    }
    let sentinels = zoo.iter().filter(|t| t.is_sentinel).count();
    if sentinels != 1 {
        return Err(Error::InvalidConfig(format!("exactly one sentinel teacher is required, found {sentinels}")));
    }
    Ok(())
}

/// The three-teacher zoo: a sentinel matching the default student
/// backbone, a low-magnitude CLIP-like teacher with a global feature, and
/// a high-magnitude detector-like teacher without one.
pub fn default_zoo() -> Vec<TeacherSpec> {
    let b = BackboneConfig::default();
    let input = [b.image_size, b.image_size];
    vec![
        TeacherSpec {
            id: "sentinel".into(),
            feature_dim: b.dim,
            grid: [b.grid(), b.grid()],
            has_global: true,
            magnitude_scale: 1.0,
            arch: TeacherArch::TinyVit { depth: b.depth, heads: b.heads, mlp_ratio: b.mlp_ratio },
            seed: 11,
            input_size: input,
            batch_size: 4,
            is_sentinel: true,
        },
        TeacherSpec {
            id: "clip-like".into(),
            feature_dim: 48,
            grid: [2, 2],
            has_global: true,
            magnitude_scale: 0.1,
            arch: TeacherArch::TinyVit { depth: 2, heads: 4, mlp_ratio: 2 },
            seed: 23,
            input_size: input,
            batch_size: 8,
            is_sentinel: false,
        },
        TeacherSpec {
            id: "detector-like".into(),
            feature_dim: 96,
            grid: [8, 8],
            has_global: false,
            magnitude_scale: 3.34,
            arch: TeacherArch::TinyConv { hidden: 32 },
            seed: 37,
            input_size: input,
            batch_size: 2,
            is_sentinel: false,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TeacherNet {
    Vit(VitBackbone),
    Conv { stages: Vec<Conv2d>, proj: Conv2d },
}

/// A frozen teacher: its parameters never require gradients.
#[derive(Debug, Clone)]
pub struct Teacher<S> {
    pub spec: TeacherSpec,
    pub store: ParamStore<S>,
    net: TeacherNet,
}

pub fn build_teacher<S: Scalar>(spec: &TeacherSpec) -> Result<Teacher<S>> {
    spec.validate()?;
    let mut rng = counter_rng(spec.seed, domain("teacher"), 0);
    let mut store = ParamStore::new();
    let net = match spec.arch {
        TeacherArch::TinyVit { .. } => {
            let cfg = spec.backbone_config().unwrap();
            TeacherNet::Vit(VitBackbone::new(&mut store, "backbone", &cfg, &mut rng)?)
        }
        TeacherArch::TinyConv { hidden } => {
            let mut stages = Vec::new();
            let mut stride = 1;
            while stride * spec.grid[0] < spec.input_size[0] {
                let cin = if stages.is_empty() { 3 } else { hidden };
                stages.push(Conv2d::new(&mut store, &format!("conv.{}", stages.len()), cin, hidden, 3, 2, &mut rng)?);
                stride *= 2;
            }
            let proj = Conv2d::new(&mut store, "proj", hidden, spec.feature_dim, 1, 1, &mut rng)?;
            TeacherNet::Conv { stages, proj }
        }
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.set_requires_grad(id, false);
    }
    Ok(Teacher { spec: spec.clone(), store, net })
}

impl<S: Scalar> Teacher<S> {
    /// Features of one `[3, H, W]` image, computed on a scratch tape.
    pub fn forward(&self, image: &Tensor<S>) -> Result<FeatureValues<S>> {
        let expect = [3, self.spec.input_size[0], self.spec.input_size[1]];
        if image.shape() != expect {
            return Err(Error::ShapeMismatch { op: "teacher-input", lhs: image.shape().to_vec(), rhs: expect.to_vec() });
        }
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let (global, grid) = self.features(&mut tape, x)?;
        let sigma = S::of(self.spec.magnitude_scale);
        let grid = tape.scale(grid, sigma)?;
        let global = match global {
            Some(g) => Some(tape.scale(g, sigma)?),
            None => None,
        };
        Ok(FeatureValues { global: global.map(|g| tape.tensor(g)), grid: tape.tensor(grid) })
    }

    pub fn forward_batch(&self, images: &[Tensor<S>]) -> Result<Vec<FeatureValues<S>>> {
        images.iter().map(|im| self.forward(im)).collect()
    }

    /// Unscaled features.
    fn features(&self, tape: &mut Tape<S>, x: Var) -> Result<(Option<Var>, Var)> {
        match &self.net {
            TeacherNet::Vit(b) => b.forward(tape, &self.store, x),
            TeacherNet::Conv { stages, proj } => {
                let mut h = x;
                let mut layout = Layout::Chw;
                for conv in stages {
                    let y = conv.forward(tape, &self.store, h, layout)?;
                    h = tape.gelu(y)?;
                    layout = Layout::Hwc;
                }
                let y = proj.forward(tape, &self.store, h, layout)?;
                let grid = tape.layer_norm(y, S::of(LN_EPS))?;
                let global = if self.spec.has_global {
                    let (gh, gw) = self.spec.grid_hw();
                    let n = gh * gw;
                    let flat = tape.reshape(grid, &[n, self.spec.feature_dim])?;
                    let pool = tape.constant_from(&[1, n], vec![S::one() / S::of(n as f64); n])?;
                    let g = tape.matmul(pool, flat)?;
                    Some(tape.reshape(g, &[self.spec.feature_dim])?)
                } else {
                    None
                };
                Ok((global, grid))
            }
        }
    }

    /// Hash of every parameter value.
    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint("")
    }
}

/// Copies the sentinel's encoder into the student backbone, name for name.
pub fn sentinel_init_student<S: Scalar>(teacher: &Teacher<S>, model: &StudentModel, store: &mut ParamStore<S>) -> Result<()> {
    if !teacher.spec.is_sentinel {
        return Err(Error::NotSentinel(teacher.spec.id.clone()));
    }
    let cfg = teacher.spec.backbone_config().ok_or_else(|| {
        Error::InvalidConfig(format!("sentinel `{}` must be a tiny-vit teacher", teacher.spec.id))
    })?;
    if cfg != model.config.backbone {
        return Err(Error::InvalidConfig(format!(
            "sentinel `{}` architecture {cfg:?} differs from the student backbone {:?}",
            teacher.spec.id, model.config.backbone
        )));
    }
    let student_count = store.with_prefix(StudentModel::BACKBONE_PREFIX).count();
    if student_count != teacher.store.len() {
        return Err(Error::InvalidConfig(format!(
            "sentinel has {} tensors, student backbone {student_count}",
            teacher.store.len()
        )));
    }
    for (_, p) in teacher.store.iter() {
        store.assign(&p.name, p.tensor.shape(), p.tensor.data())?;
    }
    Ok(())
}
