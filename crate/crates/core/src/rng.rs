// SPDX-License-Identifier: Apache-2.0

//! Fixed, documented pseudo-random source.
//!
//! The state advances with splitmix64. A uniform draw takes the top 53 bits
//! of one output and scales them into `[0, 1)`. Gaussian draws use the
//! Box–Muller transform on two uniforms `u1, u2`:
//!
//! ```text
//! r = sqrt(-2 ln(1 - u1)),  theta = 2 pi u2
//! first  = r cos(theta)      (returned)
//! second = r sin(theta)      (cached, returned by the next call)
//! ```
//!
//! All transcendental functions come from `libm`, so a seed yields the same
//! stream on every platform.

use core::f64::consts::PI;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Seeded splitmix64 generator with a Box–Muller Gaussian front end.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    state: u64,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }
}
