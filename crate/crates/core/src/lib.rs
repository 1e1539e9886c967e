//! Inline citation intent classification with peripheral sentence context.
//!
//! The crate covers corpus construction from full text ([`corpus`]), a
//! two-stream Transformer classifier coupled by cross-text attention and
//! fused by ordered weighing maps ([`attention`], [`fusion`], [`model`]),
//! loss-driven per-batch augmentation ([`augment`]), and metric reporting
//! ([`eval`]). All numerics run on the small reverse-mode kernel in
//! [`numeric`].

pub mod attention;
pub mod augment;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod numeric;

pub use error::{Error, Result};
