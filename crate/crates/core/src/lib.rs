//! Desk-scale training lab for comparing next-token prediction (NTP),
//! multi-token prediction (MTP) and token order prediction (TOP).
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode differentiation tape
//! - [`data`]: byte/toy tokenization and batch assembly with a lookahead overhang
//! - [`top_target`]: proximity-score targets for the ranking objective
//! - [`losses`]: NTP, MTP and TOP losses, including a fused sparse TOP loss
//! - [`model`]: a small rotary-attention decoder with objective-specific heads
//! - [`trainer`]: AdamW with warmup + cosine decay, clipping, checkpoints, metrics
//! - [`eval`]: held-out NTP-head loss and ranking diagnostics

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod top_target;
pub mod trainer;

pub use error::{Error, Result};
