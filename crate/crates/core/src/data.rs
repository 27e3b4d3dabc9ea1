//! Seeded synthetic images.
//!
//! A stream (one per teacher) and a batch index select a random window of
//! the finite dataset; the image at a dataset index depends only on the
//! seed and that index.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::rng::{counter_rng, domain, StreamRng};
use crate::{Error, Result, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    GaussianNoise,
    Checkerboard,
    LinearGradient,
    GaussianBlobMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedGenerator {
    pub kind: Generator,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDataConfig {
    /// `[H, W]`
    pub image_size: [usize; 2],
    pub generators: Vec<WeightedGenerator>,
    pub seed: u64,
    pub dataset_size: u64,
}

impl Default for SyntheticDataConfig {
    fn default() -> Self {
        let all = [Generator::GaussianNoise, Generator::Checkerboard, Generator::LinearGradient, Generator::GaussianBlobMixture];
        Self {
            image_size: [32, 32],
            generators: all.into_iter().map(|kind| WeightedGenerator { kind, weight: 1.0 }).collect(),
            seed: 0,
            dataset_size: 1 << 20,
        }
    }
}

impl SyntheticDataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size.contains(&0) || self.dataset_size == 0 {
            return Err(Error::InvalidConfig("data: image size and dataset size must be positive".into()));
        }
        if self.generators.is_empty() || self.generators.iter().any(|g| !(g.weight > 0.0 && g.weight.is_finite())) {
            return Err(Error::InvalidConfig("data: generator weights must be positive".into()));
        }
        Ok(())
    }
}

/// Stream id of a named consumer, e.g. a teacher.
pub fn stream_id(name: &str) -> u64 {
    domain(name)
}

/// Dataset index drawn for `(stream, batch_index, sample)`.
pub fn sample_index(config: &SyntheticDataConfig, stream: u64, batch_index: u64, sample: usize) -> u64 {
    let mut rng = counter_rng(config.seed, domain("batch") ^ stream, batch_index);
    rng.set_word_pos((sample as u128) << 8);
    rng.random_range(0..config.dataset_size)
}

pub fn generate_batch<S: Scalar>(config: &SyntheticDataConfig, stream: u64, batch_index: u64, batch_size: usize) -> Result<Vec<Tensor<S>>> {
    config.validate()?;
    (0..batch_size)
        .map(|s| generate_image(config, sample_index(config, stream, batch_index, s)))
        .collect()
}

/// Image `index` of the dataset, `[3, H, W]` with values in `[0, 1]`.
pub fn generate_image<S: Scalar>(config: &SyntheticDataConfig, index: u64) -> Result<Tensor<S>> {
    let mut rng = counter_rng(config.seed, domain("image"), index);
    let weights = WeightedIndex::new(config.generators.iter().map(|g| g.weight))
        .map_err(|e| Error::InvalidConfig(alloc::format!("data: {e}")))?;
    let kind = config.generators[weights.sample(&mut rng)].kind;
    let [h, w] = config.image_size;
    let data = render(kind, h, w, &mut rng);
    Tensor::new(&[3, h, w], data.into_iter().map(|v| S::of(v.clamp(0.0, 1.0))).collect())
}

fn color(rng: &mut StreamRng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn render(kind: Generator, h: usize, w: usize, rng: &mut StreamRng) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    let mut put = |f: &mut dyn FnMut(usize, usize, usize) -> f64| {
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[(c * h + y) * w + x] = f(c, y, x);
                }
            }
        }
    };
    match kind {
        Generator::GaussianNoise => {
            let mean = color(rng);
            let std = rng.random_range(0.05..0.25);
            let noise = Normal::new(0.0, std).expect("positive std");
            put(&mut |c, _, _| mean[c] + noise.sample(rng));
        }
        Generator::Checkerboard => {
            let a = color(rng);
            let mut b = color(rng);
            if a == b {
                b[0] = 1.0 - a[0];
            }
            put(&mut |c, y, x| if (y / 4 + x / 4) % 2 == 0 { a[c] } else { b[c] });
        }
        Generator::LinearGradient => {
            let (c0, c1) = (color(rng), color(rng));
            let angle = rng.random_range(0.0..core::f64::consts::TAU);
            let (dx, dy) = (libm::cos(angle), libm::sin(angle));
            let proj = |y: usize, x: usize| x as f64 * dx + y as f64 * dy;
            let corners = [proj(0, 0), proj(0, w - 1), proj(h - 1, 0), proj(h - 1, w - 1)];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            put(&mut |c, y, x| {
                let t = (proj(y, x) - lo) / span;
                c0[c] + (c1[c] - c0[c]) * t
            });
        }
        Generator::GaussianBlobMixture => {
            let bg = color(rng);
            let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..rng.random_range(1..=4))
                .map(|_| {
                    let col = color(rng);
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let s = rng.random_range(0.08..0.3) * h.max(w) as f64;
                    (col, cy, cx, s)
                })
                .collect();
            put(&mut |c, y, x| {
                let mut v = bg[c];
                for (col, cy, cx, s) in &blobs {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let r2 = dy * dy + dx * dx;
                    let a = libm::exp(-r2 / (2.0 * s * s));
                    v += a * (col[c] - v);
                }
                v
            });
        }
    }
    out
}
