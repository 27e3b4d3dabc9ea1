//! Layers built on the tape: linear maps, MLP heads, attention, strided
//! convolution, patch embedding and bilinear resizing.

mod attention;
mod conv;
mod linear;
mod mlp;
mod resize;
mod transformer;

pub use attention::{CrossAttentionBlock, MultiHeadAttention};
pub use conv::{Conv2d, Layout, PatchEmbed};
pub use linear::{LayerNorm, Linear};
pub use mlp::MlpHead;
pub use resize::{bilinear_matrix, bilinear_resize};
pub use transformer::{FeedForward, TransformerBlock};

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;
