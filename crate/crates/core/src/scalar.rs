use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Real scalar the whole crate is generic over.
///
/// Training runs in `f32`; gradient verification instantiates the same code
/// with `f64`.
pub trait Scalar:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width of the little-endian encoding in bytes.
    const BYTES: usize;
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn as_f32(self) -> f32;
    fn from_f32(v: f32) -> Self;
    fn write_le(self, out: &mut alloc::vec::Vec<u8>);

    /// `exp` and `tanh` from the pure-Rust libm. `Float::exp` switches to
    /// the platform library whenever anything in the build enables
    /// `num-traits/std`, which would make results depend on how the
    /// binary was built.
    fn exp_portable(self) -> Self;
    fn tanh_portable(self) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn exp_portable(self) -> Self {
        libm::expf(self)
    }
    #[inline]
    fn tanh_portable(self) -> Self {
        libm::tanhf(self)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn write_le(self, out: &mut alloc::vec::Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    #[inline]
    fn exp_portable(self) -> Self {
        libm::exp(self)
    }
    #[inline]
    fn tanh_portable(self) -> Self {
        libm::tanh(self)
    }
}
