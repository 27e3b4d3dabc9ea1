use alloc::format;
use alloc::vec::Vec;

use super::Linear;
use crate::rng::StreamRng;
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// Dense multi-head scaled dot-product attention with separate query, key,
/// value and output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!("{heads} heads do not divide dimension {dim}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `queries [Nq, D]`, `keys_values [Nk, D]` → `[Nq, D]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        queries: Var,
        keys_values: Var,
    ) -> Result<Var> {
        for v in [queries, keys_values] {
            let s = tape.shape(v);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::ShapeMismatch {
                    op: "attention",
                    lhs: s.to_vec(),
                    rhs: alloc::vec![self.dim],
                });
            }
        }
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, keys_values)?;
        let v = self.v.forward(tape, store, keys_values)?;
        let head_dim = self.dim / self.heads;
        let scale = S::one() / S::of(head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.narrow(q, 1, h * head_dim, head_dim)?,
                    tape.narrow(k, 1, h * head_dim, head_dim)?,
                    tape.narrow(v, 1, h * head_dim, head_dim)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        self.o.forward(tape, store, merged)
    }
}

/// Gated residual cross-attention: `queries + γ · Attn(queries, kv)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttentionBlock {
    pub attn: MultiHeadAttention,
    pub gate: ParamId,
}

impl CrossAttentionBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        gate_init: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, name, dim, heads, rng)?;
        let gate = store.register(format!("{name}.gate"), Tensor::scalar(S::of(gate_init)))?;
        Ok(Self { attn, gate })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        queries: Var,
        keys_values: Var,
    ) -> Result<Var> {
        let a = self.attn.forward(tape, store, queries, keys_values)?;
        let g = tape.param(store, self.gate);
        let a = tape.mul_scalar(a, g)?;
        tape.add(queries, a)
    }
}
