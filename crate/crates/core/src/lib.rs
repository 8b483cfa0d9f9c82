//! Toolchain for a parameterized MAC-array CNN training accelerator.
//!
//! The crate is organized around a shared 16-bit fixed-point core:
//!
//! - [`fxp`]: quantized number formats, exact multiply-accumulate, rounding
//!   and saturation rules. Everything numeric flows through here.
//! - [`model`]: network / hardware / dataset descriptions, the config file
//!   grammar, and the built-in image-classification networks.
//! - [`golden`]: the bit-exact functional training engine (forward, backward,
//!   weight update) used as the reference for every other execution path.
//! - [`xposebuf`]: the transposable weight buffer, a circulant block layout
//!   that serves row-order and column-order (flipped) reads without copies.
//! - [`compiler`]: turns a network plus hardware description into a tiled,
//!   scheduled plan with resource estimates and DRAM traffic.
//! - [`simarch`]: executes plans tile-by-tile (functionally bit-identical to
//!   [`golden`]) and attaches a cycle-approximate latency model.
//! - [`cli`]: the `tracc` command-line front end.

// Kernel loops index several buffers at once and fold the loop counter into
// address arithmetic; iterator rewrites would need `.enumerate()` everywhere
// and hide the addressing. Keep plain index loops.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod compiler;
mod error;
pub mod fxp;
pub mod golden;
pub mod model;
pub mod simarch;
pub mod xposebuf;

pub use error::Error;

/// Convenience result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
