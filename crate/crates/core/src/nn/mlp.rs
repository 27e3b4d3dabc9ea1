use alloc::format;
use alloc::vec;

use super::Linear;
use crate::rng::StreamRng;
use crate::{Error, FeatureSet, ParamStore, Result, Scalar, SpaceTag, Tape, Var};

/// Two linear layers with a GELU in between, applied position-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpHead {
    /// `hidden` defaults to `max(in_dim, out_dim)`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        hidden: Option<usize>,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let hidden = hidden.unwrap_or(in_dim.max(out_dim));
        let fc1 = Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }

    /// Applies the head to every grid position and to the global vector
    /// when present. The result carries `space`.
    pub fn project<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        fs: &FeatureSet,
        space: SpaceTag,
    ) -> Result<FeatureSet> {
        if fs.dim != self.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp-project",
                lhs: tape.shape(fs.grid).to_vec(),
                rhs: vec![self.in_dim()],
            });
        }
        let grid = self.forward(tape, store, fs.grid)?;
        let global = match fs.global {
            Some(g) => Some(self.forward(tape, store, g)?),
            None => None,
        };
        FeatureSet::new(tape, global, grid, space)
    }

    /// Sets the head to compute the identity exactly up to rounding, using
    /// `gelu(x) − gelu(−x) = x`. Needs `in == out` and `hidden == 2·in`.
    pub fn make_identity<S: Scalar>(&self, store: &mut ParamStore<S>) -> Result<()> {
        let d = self.in_dim();
        if self.out_dim() != d || self.hidden() != 2 * d {
            return Err(Error::InvalidConfig(format!(
                "identity head needs in == out and hidden == 2·in, got {}→{}→{}",
                d,
                self.hidden(),
                self.out_dim()
            )));
        }
        let mut w1 = vec![S::zero(); 2 * d * d];
        let mut w2 = vec![S::zero(); d * 2 * d];
        for i in 0..d {
            w1[i * d + i] = S::one();
            w1[(d + i) * d + i] = -S::one();
            w2[i * 2 * d + i] = S::one();
            w2[i * 2 * d + d + i] = -S::one();
        }
        self.fc1.set(store, &w1, &vec![S::zero(); 2 * d])?;
        self.fc2.set(store, &w2, &vec![S::zero(); d])
    }
}
