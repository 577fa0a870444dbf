//! Forward-only multi-head attention and 2D sinusoidal positional encoding.
//!
//! With identity projections and a large score scale, attention of a
//! prototype query over a slide's patches collapses onto the single most
//! similar patch, which is the `H-k(1)` pooled row. The transformer baselines
//! here take externally supplied weights; nothing is trained.

mod mha;
mod positional;
mod transformer;

pub use mha::{attention_weights, mha_forward, AttentionConfig, HeadWeights};
pub use positional::{positional_encoding, positional_matrix, with_positions, PeMode, PE_EPSILON};
pub use transformer::{transformer_forward, TransformerVariant, TransformerWeights};
