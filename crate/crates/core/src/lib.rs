// SPDX-License-Identifier: Apache-2.0

//! Cross-frame intensity (CFI) enhancement for temporal attention.
//!
//! The crate is `no_std` with `alloc`. It holds a small dense tensor
//! substrate, frame-axis temporal attention, the enhance block with its
//! two attention-temperature alternatives, a deterministic toy video
//! diffusion transformer, and the pure parts of the analysis tooling.
//! File formats, the CLI and wall-clock timing live in the `eav` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod attention;
pub mod enhance;
mod error;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
