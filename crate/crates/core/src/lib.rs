//! Library for deconstructing the attention mechanism at desk scale:
//! seven token-mixing variants (standard softmax attention, a gated MLP,
//! Taylor-approximate and self-gating linear forms, and three
//! fixed/static-QK forms), composable into uniform, hybrid, and skip
//! decoder stacks, with attention-pattern diagnostics, an analytical
//! FLOPs/memory/cache cost model, and a byte-level training harness.

pub mod error;
pub mod attention;
pub mod cost;
pub mod diagnostics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
