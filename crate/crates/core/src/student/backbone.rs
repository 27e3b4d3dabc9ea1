use alloc::format;
use alloc::vec::Vec;

use super::BackboneConfig;
use crate::nn::{LayerNorm, PatchEmbed, TransformerBlock};
use crate::params::normal;
use crate::rng::StreamRng;
use crate::{ParamId, ParamStore, Result, Scalar, Tape, Var};

/// ViT-style encoder shared by the student and by tiny-vit teachers, so
/// the sentinel's weights copy over name for name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitBackbone {
    pub config: BackboneConfig,
    pub patch: PatchEmbed,
    pub cls: Option<ParamId>,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl VitBackbone {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, config: &BackboneConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch = PatchEmbed::new(store, &format!("{prefix}.patch_embed"), 3, config.patch_size, d, rng)?;
        let cls = if config.class_token {
            Some(store.register(format!("{prefix}.cls_token"), normal(rng, &[d], 0.02)?)?)
        } else {
            None
        };
        let n = config.tokens() + usize::from(config.class_token);
        let pos = store.register(format!("{prefix}.pos_embed"), normal(rng, &[n, d], 0.02)?)?;
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.blocks.{i}"), d, config.heads, config.mlp_ratio, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), d)?;
        Ok(Self { config: config.clone(), patch, cls, pos, blocks, norm })
    }

    /// Patch tokens with the class token prepended and positions added:
    /// `[1 + N, D]` (or `[N, D]` without a class token).
    pub fn embed<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<Var> {
        let patches = self.patch.forward(tape, store, image)?;
        let tokens = match self.cls {
            Some(cls) => {
                let c = tape.param(store, cls);
                let c = tape.reshape(c, &[1, self.config.dim])?;
                tape.concat(&[c, patches], 0)?
            }
            None => patches,
        };
        let pos = tape.param(store, self.pos);
        tape.add(tokens, pos)
    }

    pub fn block<S: Scalar>(&self, i: usize, tape: &mut Tape<S>, store: &ParamStore<S>, tokens: Var) -> Result<Var> {
        self.blocks[i].forward(tape, store, tokens)
    }

    /// Index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        usize::from(self.cls.is_some())
    }

    pub fn split_patches<S: Scalar>(&self, tape: &mut Tape<S>, tokens: Var) -> Result<(Option<Var>, Var)> {
        let off = self.patch_offset();
        if off == 0 {
            return Ok((None, tokens));
        }
        let cls = tape.narrow(tokens, 0, 0, 1)?;
        let patches = tape.narrow(tokens, 0, off, self.config.tokens())?;
        Ok((Some(cls), patches))
    }

    pub fn join_patches<S: Scalar>(&self, tape: &mut Tape<S>, cls: Option<Var>, patches: Var) -> Result<Var> {
        match cls {
            Some(c) => tape.concat(&[c, patches], 0),
            None => Ok(patches),
        }
    }

    /// Final norm, then `(class token [D], grid [H, W, D])`.
    pub fn finish<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, tokens: Var) -> Result<(Option<Var>, Var)> {
        let x = self.norm.forward(tape, store, tokens)?;
        let (cls, patches) = self.split_patches(tape, x)?;
        let g = self.config.grid();
        let grid = tape.reshape(patches, &[g, g, self.config.dim])?;
        let global = match cls {
            Some(c) => Some(tape.reshape(c, &[self.config.dim])?),
            None => None,
        };
        Ok((global, grid))
    }

    /// Plain forward pass without any adapter.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<(Option<Var>, Var)> {
        let mut x = self.embed(tape, store, image)?;
        for i in 0..self.blocks.len() {
            x = self.block(i, tape, store, x)?;
        }
        self.finish(tape, store, x)
    }
}
