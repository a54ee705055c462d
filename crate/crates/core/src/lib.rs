//! Alignment and retrieval machinery for structured incident-response
//! reasoning, at a scale where every quantity can be checked exactly.
//!
//! * [`cot`] parses the four-stage chain and its tag order.
//! * [`reward`] scores a chain: structure, expert-term coverage with a
//!   perplexity penalty, and semantic similarity to reference cases.
//! * [`policy`] is an n-gram softmax policy with exact losses and gradients.
//! * [`grpo`] runs group-relative policy optimization over that policy.
//! * [`graphrag`] builds an incrementally mergeable knowledge graph and
//!   answers dual-level (entity / relation) queries.
//! * [`fusion`] holds the visual projection, rotary layout and
//!   visual-prior reweighting kernels.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cot;
pub mod error;
pub mod fusion;
pub mod graphrag;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod synthetic;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
