//! A frozen decoder-only language model with per-layer trainable
//! image-token QKV/FFN branches, box-coordinate tokenization, grounding
//! data conversions, and a desk-scale training loop.

pub mod gradcheck;
pub mod tensor;

pub(crate) mod par;
