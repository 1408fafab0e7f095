//! Multi-hop semantic image transmission toolkit.
//!
//! A learned joint source-channel codec (a small vision transformer, plus a
//! convolutional baseline) maps images to power-normalized complex channel
//! symbols. Chaining decode/re-encode relays accumulates distortion hop by
//! hop; recursive training unrolls the chain and optimizes a weighted sum of
//! per-hop distortions to counter it. The harness reproduces the standard
//! experiment grids (PSNR vs hops, PSNR vs SNR, separate-coding baseline
//! with its cliff effect) with fully seeded determinism.

pub mod channel;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod keys;
pub mod multihop;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
