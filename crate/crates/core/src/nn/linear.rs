use num_traits::Float;
use alloc::format;

use crate::params::uniform;
use crate::rng::StreamRng;
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Tensor, Var};

/// `y = x·Wᵀ + b` over the trailing axis; `W` is `[out_dim × in_dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/√in_dim` initialization for weight and bias.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let bound = 1.0 / Float::sqrt(in_dim as f64);
        let weight = store.register(format!("{name}.weight"), uniform(rng, &[out_dim, in_dim], bound)?)?;
        let bias = store.register(format!("{name}.bias"), uniform(rng, &[out_dim], bound)?)?;
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let last = *tape.shape(x).last().unwrap();
        if last != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: alloc::vec![self.out_dim, self.in_dim],
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul_t(x, w)?;
        let shape = tape.shape(y).to_vec();
        let bb = tape.broadcast(b, &shape)?;
        tape.add(y, bb)
    }

    pub fn is_frozen<S: Scalar>(&self, store: &ParamStore<S>) -> bool {
        !store.get(self.weight).requires_grad() && !store.get(self.bias).requires_grad()
    }

    /// Overwrites weight and bias.
    pub fn set<S: Scalar>(&self, store: &mut ParamStore<S>, weight: &[S], bias: &[S]) -> Result<()> {
        let w = store.get_mut(self.weight);
        if w.numel() != weight.len() {
            return Err(Error::ShapeMismatch { op: "linear", lhs: w.shape().to_vec(), rhs: alloc::vec![weight.len()] });
        }
        w.data_mut().copy_from_slice(weight);
        let b = store.get_mut(self.bias);
        if b.numel() != bias.len() {
            return Err(Error::ShapeMismatch { op: "linear", lhs: b.shape().to_vec(), rhs: alloc::vec![bias.len()] });
        }
        b.data_mut().copy_from_slice(bias);
        Ok(())
    }
}

/// Layer norm over the trailing axis with learned scale and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        let weight = store.register(format!("{name}.weight"), Tensor::full(&[dim], S::one())?)?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[dim])?)?;
        Ok(Self { weight, bias, dim })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, S::of(super::LN_EPS))?;
        let shape = tape.shape(y).to_vec();
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let wb = tape.broadcast(w, &shape)?;
        let bb = tape.broadcast(b, &shape)?;
        let y = tape.mul(y, wb)?;
        tape.add(y, bb)
    }
}
