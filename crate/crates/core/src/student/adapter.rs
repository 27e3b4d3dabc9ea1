use alloc::format;
use alloc::vec::Vec;

use super::AdapterConfig;
use crate::nn::{Conv2d, CrossAttentionBlock, FeedForward, LayerNorm, Layout};
use crate::rng::StreamRng;
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Convolutional spatial prior module: a stride-4 stem followed by
/// stride-2 stages, with a 1×1 projection to the model width at every
/// requested output stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spm {
    pub stem: [Conv2d; 2],
    /// Stride-2 stages; `downs[i]` brings the map to stride `8 << i`.
    pub downs: Vec<Conv2d>,
    /// `(stride, 1×1 projection)` per output scale.
    pub outputs: Vec<(usize, Conv2d)>,
    /// Scales the adapter's contribution to every output map.
    pub gate: ParamId,
}

impl Spm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: &AdapterConfig,
        dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let c = config.spm_channels;
        let stem = [
            Conv2d::new(store, &format!("{prefix}.stem.0"), 3, c, 3, 2, rng)?,
            Conv2d::new(store, &format!("{prefix}.stem.1"), c, c, 3, 2, rng)?,
        ];
        let max = *config.scales.last().unwrap();
        let mut downs = Vec::new();
        let mut stride = 4;
        while stride < max {
            downs.push(Conv2d::new(store, &format!("{prefix}.down.{}", downs.len()), c, c, 3, 2, rng)?);
            stride *= 2;
        }
        let outputs = config
            .scales
            .iter()
            .map(|&s| Ok((s, Conv2d::new(store, &format!("{prefix}.out.{s}"), c, dim, 1, 1, rng)?)))
            .collect::<Result<_>>()?;
        let gate = store.register(format!("{prefix}.gate"), Tensor::scalar(S::of(config.gate_init)))?;
        Ok(Self { stem, downs, outputs, gate })
    }

    /// Adapter maps `[h_s, w_s, D]` in ascending stride order.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<Vec<Var>> {
        let x = self.stem[0].forward(tape, store, image, Layout::Chw)?;
        let x = tape.gelu(x)?;
        let x = self.stem[1].forward(tape, store, x, Layout::Hwc)?;
        let mut x = tape.gelu(x)?;
        let mut stride = 4;
        let mut maps = Vec::with_capacity(self.outputs.len());
        let mut downs = self.downs.iter();
        for &(s, proj) in &self.outputs {
            while stride < s {
                let down = downs.next().ok_or_else(|| Error::InvalidConfig("spm stages".into()))?;
                let y = down.forward(tape, store, x, Layout::Hwc)?;
                x = tape.gelu(y)?;
                stride *= 2;
            }
            maps.push(proj.forward(tape, store, x, Layout::Hwc)?);
        }
        Ok(maps)
    }
}

/// Injector (backbone tokens attend to adapter tokens), extractor (adapter
/// tokens attend to backbone tokens) and a feed-forward sublayer on the
/// adapter tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionBlock {
    pub injector: CrossAttentionBlock,
    pub extractor: CrossAttentionBlock,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl InteractionBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: &AdapterConfig,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Ok(Self {
            injector: CrossAttentionBlock::new(store, &format!("{prefix}.injector"), dim, heads, config.gate_init, rng)?,
            extractor: CrossAttentionBlock::new(store, &format!("{prefix}.extractor"), dim, heads, config.gate_init, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn.norm"), dim)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), dim, dim * config.ffn_ratio, rng)?,
        })
    }

    pub fn inject<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, patches: Var, adapter: Var) -> Result<Var> {
        self.injector.forward(tape, store, patches, adapter)
    }

    pub fn extract<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, adapter: Var, patches: Var) -> Result<Var> {
        let c = self.extractor.forward(tape, store, adapter, patches)?;
        let h = self.ffn_norm.forward(tape, store, c)?;
        let h = self.ffn.forward(tape, store, h)?;
        tape.add(c, h)
    }
}
