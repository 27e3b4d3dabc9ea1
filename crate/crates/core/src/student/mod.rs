//! The student: a frozen ViT backbone initialized from the sentinel
//! teacher, a trainable adapter (spatial prior module plus interaction
//! blocks), and one head triple per teacher.

mod adapter;
mod backbone;
mod config;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub use adapter::{InteractionBlock, Spm};
pub use backbone::VitBackbone;
pub use config::{AdapterConfig, BackboneConfig, StudentConfig, TrainPolicy};

use crate::hash::fnv1a;
use crate::nn::{bilinear_resize, MlpHead};
use crate::rng::{counter_rng, domain};
use crate::teacher::TeacherSpec;
use crate::{Error, FeatureSet, ParamId, ParamStore, Result, Scalar, SpaceTag, Tape, Var};

/// Per-teacher projections: student→teacher, teacher→unified and
/// unified→teacher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadTriple {
    pub s2t: MlpHead,
    pub t2s: MlpHead,
    pub rec: MlpHead,
    pub teacher_dim: usize,
    pub teacher_hw: (usize, usize),
    pub has_global: bool,
}

/// Output of [`StudentModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput {
    pub canonical: FeatureSet,
    /// `(stride, grid [h, w, D])`, ascending stride.
    pub multiscale: Vec<(usize, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub backbone: VitBackbone,
    pub spm: Spm,
    pub blocks: Vec<InteractionBlock>,
    pub heads: BTreeMap<String, HeadTriple>,
}

/// Index of the grid whose token count is closest to the target's; ties go
/// to the larger grid.
pub fn select_scale(grids: &[(usize, usize)], target: (usize, usize)) -> Option<usize> {
    let want = target.0 * target.1;
    let mut best: Option<(usize, usize, usize)> = None;
    for (i, &(h, w)) in grids.iter().enumerate() {
        let n = h * w;
        let diff = n.abs_diff(want);
        let better = match best {
            None => true,
            Some((_, bd, bn)) => diff < bd || (diff == bd && n > bn),
        };
        if better {
            best = Some((i, diff, n));
        }
    }
    best.map(|b| b.0)
}

impl StudentModel {
    pub const BACKBONE_PREFIX: &'static str = "backbone.";
    pub const ADAPTER_PREFIX: &'static str = "adapter.";
    pub const HEADS_PREFIX: &'static str = "heads.";

    /// Builds all parameters. Heads for the sentinel are sized `2·D` wide
    /// and start as the identity when `identity_sentinel_heads` is set.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &StudentConfig,
        teachers: &[TeacherSpec],
        seed: u64,
        identity_sentinel_heads: bool,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.backbone.dim;
        let backbone = VitBackbone::new(store, "backbone", &config.backbone, &mut counter_rng(seed, domain("backbone"), 0))?;
        let mut rng = counter_rng(seed, domain("adapter"), 0);
        let spm = Spm::new(store, "adapter.spm", &config.adapter, d, &mut rng)?;
        let blocks = (0..config.adapter.blocks)
            .map(|i| InteractionBlock::new(store, &format!("adapter.block{i}"), &config.adapter, d, config.backbone.heads, &mut rng))
            .collect::<Result<_>>()?;
        let mut model = Self { config: config.clone(), backbone, spm, blocks, heads: BTreeMap::new() };
        for t in teachers {
            model.add_heads(store, t, seed, identity_sentinel_heads)?;
        }
        Ok(model)
    }

    /// Registers the head triple for one teacher. Each teacher's heads are
    /// drawn from their own random stream.
    pub fn add_heads<S: Scalar>(&mut self, store: &mut ParamStore<S>, t: &TeacherSpec, seed: u64, identity_sentinel: bool) -> Result<()> {
        t.validate()?;
        if self.heads.contains_key(&t.id) {
            return Err(Error::InvalidConfig(format!("duplicate heads for `{}`", t.id)));
        }
        let d = self.config.backbone.dim;
        let identity = identity_sentinel && t.is_sentinel && t.feature_dim == d;
        let hidden = if identity { Some(2 * d) } else { self.config.head_hidden };
        let mut rng = counter_rng(seed, domain("heads"), fnv1a(t.id.as_bytes()));
        let p = format!("heads.{}", t.id);
        let s2t = MlpHead::new(store, &format!("{p}.s2t"), d, t.feature_dim, hidden, &mut rng)?;
        let t2s = MlpHead::new(store, &format!("{p}.t2s"), t.feature_dim, d, hidden, &mut rng)?;
        let rec = MlpHead::new(store, &format!("{p}.rec"), d, t.feature_dim, hidden, &mut rng)?;
        if identity {
            for h in [&s2t, &t2s, &rec] {
                h.make_identity(store)?;
            }
        }
        self.heads.insert(
            t.id.clone(),
            HeadTriple { s2t, t2s, rec, teacher_dim: t.feature_dim, teacher_hw: t.grid_hw(), has_global: t.has_global },
        );
        Ok(())
    }

    pub fn head(&self, teacher: &str) -> Result<&HeadTriple> {
        self.heads.get(teacher).ok_or_else(|| Error::UnknownTeacher(teacher.to_string()))
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        let g = self.config.backbone.grid();
        (g, g)
    }

    /// Full forward pass on one `[3, H, W]` image.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<StudentOutput> {
        let cfg = &self.config;
        let s = tape.shape(image);
        let size = cfg.backbone.image_size;
        if s != [3, size, size] {
            return Err(Error::ShapeMismatch { op: "student-input", lhs: s.to_vec(), rhs: alloc::vec![3, size, size] });
        }
        let d = cfg.backbone.dim;
        let maps = self.spm.forward(tape, store, image)?;
        let shapes: Vec<(usize, usize)> = maps.iter().map(|&m| (tape.shape(m)[0], tape.shape(m)[1])).collect();
        let flat = maps
            .iter()
            .zip(&shapes)
            .map(|(&m, &(h, w))| tape.reshape(m, &[h * w, d]))
            .collect::<Result<Vec<_>>>()?;
        let mut adapter = if flat.len() == 1 { flat[0] } else { tape.concat(&flat, 0)? };

        let depth = cfg.backbone.depth;
        let k = self.blocks.len();
        let mut tokens = self.backbone.embed(tape, store, image)?;
        for (g, block) in self.blocks.iter().enumerate() {
            let (cls, patches) = self.backbone.split_patches(tape, tokens)?;
            let patches = block.inject(tape, store, patches, adapter)?;
            tokens = self.backbone.join_patches(tape, cls, patches)?;
            for i in g * depth / k..(g + 1) * depth / k {
                tokens = self.backbone.block(i, tape, store, tokens)?;
            }
            let (_, patches) = self.backbone.split_patches(tape, tokens)?;
            adapter = block.extract(tape, store, adapter, patches)?;
        }
        let (global, grid) = self.backbone.finish(tape, store, tokens)?;
        let gate = tape.param(store, self.spm.gate);
        let (gh, gw) = self.grid_hw();

        let mut multiscale = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        let mut fused = None;
        for (&(stride, _), &(h, w)) in self.spm.outputs.iter().zip(&shapes) {
            let part = if shapes.len() == 1 { adapter } else { tape.narrow(adapter, 0, offset, h * w)? };
            offset += h * w;
            let part = tape.reshape(part, &[h, w, d])?;
            let gated = tape.mul_scalar(part, gate)?;
            let base = bilinear_resize(tape, grid, (h, w))?;
            multiscale.push((stride, tape.add(base, gated)?));
            if stride == cfg.adapter.fusion_stride {
                let up = bilinear_resize(tape, part, (gh, gw))?;
                fused = Some(tape.mul_scalar(up, gate)?);
            }
        }
        let fused = fused.ok_or_else(|| Error::InvalidConfig("fusion stride is not an adapter scale".into()))?;
        let grid = tape.add(grid, fused)?;
        let canonical = FeatureSet::new(tape, global, grid, SpaceTag::Student)?;
        Ok(StudentOutput { canonical, multiscale })
    }

    /// Student features projected into teacher `id`'s native space, using
    /// the multiscale grid closest in size to the teacher's.
    pub fn project_s2t<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, id: &str, out: &StudentOutput) -> Result<FeatureSet> {
        let head = self.head(id)?;
        let sizes: Vec<(usize, usize)> = out.multiscale.iter().map(|&(_, g)| (tape.shape(g)[0], tape.shape(g)[1])).collect();
        let pick = select_scale(&sizes, head.teacher_hw).ok_or_else(|| Error::InvalidConfig("no multiscale grids".into()))?;
        let grid = bilinear_resize(tape, out.multiscale[pick].1, head.teacher_hw)?;
        let global = if head.has_global { out.canonical.global } else { None };
        let fs = FeatureSet::new(tape, global, grid, SpaceTag::Student)?;
        head.s2t.project(tape, store, &fs, SpaceTag::Teacher(id.to_string()))
    }

    /// Teacher features resized to the student grid, then mapped into the
    /// unified space.
    pub fn project_t2s<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        id: &str,
        teacher: &FeatureSet,
        student_hw: (usize, usize),
    ) -> Result<FeatureSet> {
        let head = self.head(id)?;
        teacher.expect_space(&SpaceTag::Teacher(id.to_string()))?;
        let grid = bilinear_resize(tape, teacher.grid, student_hw)?;
        let fs = FeatureSet::new(tape, teacher.global, grid, teacher.space.clone())?;
        head.t2s.project(tape, store, &fs, SpaceTag::Unified)
    }

    /// Unified features mapped back into teacher `id`'s space, then resized
    /// to the teacher grid.
    pub fn reconstruct<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        id: &str,
        unified: &FeatureSet,
        teacher_hw: (usize, usize),
    ) -> Result<FeatureSet> {
        let head = self.head(id)?;
        unified.expect_space(&SpaceTag::Unified)?;
        let fs = head.rec.project(tape, store, unified, SpaceTag::Teacher(id.to_string()))?;
        let grid = bilinear_resize(tape, fs.grid, teacher_hw)?;
        FeatureSet::new(tape, fs.global, grid, fs.space)
    }

    fn is_backbone<S: Scalar>(store: &ParamStore<S>, id: ParamId) -> bool {
        store.name(id).starts_with(Self::BACKBONE_PREFIX)
    }

    /// Adapter and heads, plus the backbone when preservation is off.
    pub fn trainable_parameters<S: Scalar>(&self, store: &ParamStore<S>, policy: TrainPolicy) -> Vec<ParamId> {
        store
            .ids()
            .filter(|&id| {
                let n = store.name(id);
                let own = n.starts_with(Self::ADAPTER_PREFIX) || n.starts_with(Self::HEADS_PREFIX);
                own || (!policy.preservation_on && Self::is_backbone(store, id))
            })
            .collect()
    }

    /// Sets gradient flags to match `policy`; values are untouched.
    pub fn apply_policy<S: Scalar>(&self, store: &mut ParamStore<S>, policy: TrainPolicy) -> Vec<ParamId> {
        let trainable = self.trainable_parameters(store, policy);
        let all: Vec<ParamId> = store.ids().collect();
        for id in all {
            store.set_requires_grad(id, trainable.contains(&id));
        }
        trainable
    }

    pub fn backbone_fingerprint<S: Scalar>(store: &ParamStore<S>) -> u64 {
        store.fingerprint(Self::BACKBONE_PREFIX)
    }
}
