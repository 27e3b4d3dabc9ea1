use num_traits::Float;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::PAD;
use crate::params::uniform;
use crate::rng::StreamRng;
use crate::{Error, ParamId, ParamStore, Result, Scalar, Tape, Var};

/// Memory order of a `C × H × W` image or feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `[C, H, W]`
    Chw,
    /// `[H, W, C]`
    Hwc,
}

/// 2-D cross-correlation, computed as an unfold (gather) followed by a
/// matrix product. Weight is `[C_out, C_in, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Zero padding of `kernel / 2`, so an odd kernel gives `ceil(H / stride)`
    /// output rows.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Self::with_padding(store, name, in_channels, out_channels, kernel, stride, kernel / 2, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_padding<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig(format!("conv {name}: kernel, stride and channels must be positive")));
        }
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / Float::sqrt(fan_in as f64);
        let weight = store.register(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, in_channels, kernel, kernel], bound)?,
        )?;
        let bias = store.register(format!("{name}.bias"), uniform(rng, &[out_channels], bound)?)?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride, padding })
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::InvalidShape { shape: vec![h, w], reason: format!("kernel {} does not fit", self.kernel) });
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }

    fn unfold_index(&self, c: usize, h: usize, w: usize, layout: Layout) -> Result<(Arc<[u32]>, usize, usize)> {
        let (oh, ow) = self.output_hw(h, w)?;
        let k = self.kernel;
        let cols = c * k * k;
        let mut index = Vec::with_capacity(oh * ow * cols);
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.padding as isize;
                            let x = (ox * self.stride + kx) as isize - self.padding as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                index.push(PAD);
                                continue;
                            }
                            let (y, x) = (y as usize, x as usize);
                            let flat = match layout {
                                Layout::Chw => (ci * h + y) * w + x,
                                Layout::Hwc => (y * w + x) * c + ci,
                            };
                            index.push(flat as u32);
                        }
                    }
                }
            }
        }
        Ok((index.into(), oh, ow))
    }

    /// Returns the output as `[H', W', C_out]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, layout: Layout) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (c, h, w) = match (s.len(), layout) {
            (3, Layout::Chw) => (s[0], s[1], s[2]),
            (3, Layout::Hwc) => (s[2], s[0], s[1]),
            _ => return Err(Error::InvalidShape { shape: s, reason: "conv input must be 3-D".into() }),
        };
        if c != self.in_channels {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: s, rhs: vec![self.in_channels] });
        }
        let (index, oh, ow) = self.unfold_index(c, h, w, layout)?;
        let cols = c * self.kernel * self.kernel;
        let patches = tape.gather(x, index, &[oh * ow, cols])?;
        let wv = tape.param(store, self.weight);
        let wv = tape.reshape(wv, &[self.out_channels, cols])?;
        let b = tape.param(store, self.bias);
        let y = tape.matmul_t(patches, wv)?;
        let bb = tape.broadcast(b, &[oh * ow, self.out_channels])?;
        let y = tape.add(y, bb)?;
        tape.reshape(y, &[oh, ow, self.out_channels])
    }

    /// Same as [`Conv2d::forward`] but returns `[C_out, H', W']`.
    pub fn forward_chw<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, layout: Layout) -> Result<Var> {
        let y = self.forward(tape, store, x, layout)?;
        let s = tape.shape(y).to_vec();
        let flat = tape.reshape(y, &[s[0] * s[1], s[2]])?;
        let t = tape.transpose(flat)?;
        tape.reshape(t, &[s[2], s[0], s[1]])
    }
}

/// Non-overlapping `P × P` patches of a `[3, H, W]` image projected to `D`.
/// Tokens come out in raster order as `[(H/P)·(W/P), D]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        patch: usize,
        dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let proj = Conv2d::with_padding(store, &format!("{name}.proj"), channels, dim, patch, patch, 0, rng)?;
        Ok(Self { proj, patch })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[1] % self.patch != 0 || s[2] % self.patch != 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: format!("patch size {} must divide the image", self.patch),
            });
        }
        let y = self.proj.forward(tape, store, image, Layout::Chw)?;
        let s = tape.shape(y).to_vec();
        tape.reshape(y, &[s[0] * s[1], s[2]])
    }
}
