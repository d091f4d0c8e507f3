// SPDX-License-Identifier: Apache-2.0

use alloc::string::String;

/// Errors raised by tensor, attention, enhancement and pipeline operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes, bad reshape/permutation, or a token grid that does
    /// not factor the input.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar argument outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// The operation is undefined on its input (e.g. the mean of nothing).
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid enhancement or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Two trace records that cannot be compared.
    #[error("pairing error: {0}")]
    Pairing(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
