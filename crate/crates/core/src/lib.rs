//! A small sequence-modeling laboratory for exclusive self attention (XSA).
//!
//! XSA is ordinary causal multi-head attention followed by one extra step:
//! each head's output `y_i` has its component along the position's own value
//! vector `v_i` removed, `z_i = y_i - (y_i . v_i) v_i / |v_i|^2`. The crate
//! provides everything needed to study that change at desk scale:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation.
//! - [`attention`]: SA / XSA attention with RoPE, sinks and trace capture.
//! - [`model`]: a pre-LN decoder-only language model, sampling and checkpoints.
//! - [`training`]: byte-level data pipeline, AdamW, warmup + cosine schedule.
//! - [`probe`]: per-layer attention-similarity statistics.
//! - [`bench`]: time / memory overhead of XSA versus SA on one block.

pub mod attention;
pub mod bench;
mod error;
pub mod gradcheck;
pub mod model;
pub mod probe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
