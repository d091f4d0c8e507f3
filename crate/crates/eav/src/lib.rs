// SPDX-License-Identifier: Apache-2.0

//! Std companion to `eav-core`: TOML configs, trace/latent/map file formats,
//! wall-clock timing, and the `eav` command implementations.

pub mod commands;
pub mod config;
mod error;
pub mod formats;

pub use error::CliError;
