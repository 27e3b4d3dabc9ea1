//! Feature sets `X = {x, V}`: an optional global vector and a spatial grid,
//! tagged with the latent space they live in.

use alloc::string::String;
use core::fmt;

use crate::{Error, Result, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SpaceTag {
    /// The student's own feature space.
    Student,
    /// Native space of one teacher.
    Teacher(String),
    /// The space shared by all teachers after `t2s` projection.
    Unified,
}

impl fmt::Display for SpaceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpaceTag::Student => f.write_str("student"),
            SpaceTag::Teacher(id) => write!(f, "teacher:{id}"),
            SpaceTag::Unified => f.write_str("unified"),
        }
    }
}

/// Features recorded on a tape. `grid` has shape `[H, W, D]`, `global`
/// shape `[D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub global: Option<Var>,
    pub grid: Var,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub space: SpaceTag,
}

impl FeatureSet {
    pub fn new<S: Scalar>(tape: &Tape<S>, global: Option<Var>, grid: Var, space: SpaceTag) -> Result<Self> {
        let gs = tape.shape(grid);
        if gs.len() != 3 {
            return Err(Error::InvalidShape { shape: gs.to_vec(), reason: "grid must be [H, W, D]".into() });
        }
        let (height, width, dim) = (gs[0], gs[1], gs[2]);
        if let Some(g) = global {
            if tape.shape(g) != [dim] {
                return Err(Error::ShapeMismatch {
                    op: "feature-set",
                    lhs: tape.shape(g).to_vec(),
                    rhs: gs.to_vec(),
                });
            }
        }
        Ok(Self { global, grid, height, width, dim, space })
    }

    pub fn constant<S: Scalar>(tape: &mut Tape<S>, values: &FeatureValues<S>, space: SpaceTag) -> Result<Self> {
        let grid = tape.constant(&values.grid);
        let global = values.global.as_ref().map(|g| tape.constant(g));
        Self::new(tape, global, grid, space)
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Reinterprets student-space features as living in the unified space;
    /// the two spaces are identified.
    pub fn as_unified(&self) -> Result<Self> {
        match self.space {
            SpaceTag::Student | SpaceTag::Unified => Ok(Self { space: SpaceTag::Unified, ..self.clone() }),
            _ => Err(Error::SpaceMismatch { expected: "student".into(), found: alloc::format!("{}", self.space) }),
        }
    }

    pub fn expect_space(&self, expected: &SpaceTag) -> Result<()> {
        if &self.space != expected {
            return Err(Error::SpaceMismatch {
                expected: alloc::format!("{expected}"),
                found: alloc::format!("{}", self.space),
            });
        }
        Ok(())
    }

    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> FeatureValues<S> {
        FeatureValues { global: self.global.map(|g| tape.tensor(g)), grid: tape.tensor(self.grid) }
    }
}

/// Plain feature values, as produced by a teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureValues<S> {
    pub global: Option<Tensor<S>>,
    pub grid: Tensor<S>,
}

impl<S: Scalar> FeatureValues<S> {
    pub fn hw(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[2]
    }
}
