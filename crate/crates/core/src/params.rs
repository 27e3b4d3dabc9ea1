//! Named parameter storage shared by the student, the teachers and the
//! optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::hash::Fnv1a;
use crate::rng::StreamRng;
use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registers a parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::InvalidConfig(alloc::format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.params.push(Param { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
    }

    pub fn set_requires_grad(&mut self, id: ParamId, on: bool) {
        self.params[id.0].tensor.set_requires_grad(on);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn numel(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.get(id).numel()).sum()
    }

    /// Replaces the values of `name` keeping its gradient flag.
    pub fn assign(&mut self, name: &str, shape: &[usize], data: &[S]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::UnknownParam(name.into()))?;
        let t = &mut self.params[id.0].tensor;
        if t.shape() != shape {
            return Err(Error::ParamShape {
                name: name.into(),
                expected: t.shape().to_vec(),
                found: shape.to_vec(),
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// FNV-1a over names, shapes and values of every parameter whose name
    /// starts with `prefix`, in registration order.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h = Fnv1a::new();
        let mut buf = Vec::new();
        for id in self.with_prefix(prefix) {
            let p = &self.params[id.0];
            h.write(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.write(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.tensor.data() {
                v.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Initializers used when building networks.
pub(crate) fn uniform<S: Scalar>(rng: &mut StreamRng, shape: &[usize], bound: f64) -> Result<Tensor<S>> {
    Tensor::from_fn(shape, |_| S::of(rng.random_range(-bound..bound)))
}

pub(crate) fn normal<S: Scalar>(rng: &mut StreamRng, shape: &[usize], std: f64) -> Result<Tensor<S>> {
    let dist = Normal::new(0.0, std).map_err(|_| Error::InvalidConfig("normal std".into()))?;
    Tensor::from_fn(shape, |_| S::of(dist.sample(rng)))
}
