//! Seeded pseudo-random numbers that are reproducible across
//! implementations.
//!
//! The generator is SplitMix64. One step is
//!
//! ```text
//! state ← state + 0x9E3779B97F4A7C15            (mod 2^64)
//! z ← state
//! z ← (z ⊕ (z >> 30)) · 0xBF58476D1CE4E5B9      (mod 2^64)
//! z ← (z ⊕ (z >> 27)) · 0x94D049BB133111EB      (mod 2^64)
//! output z ⊕ (z >> 31)
//! ```
//!
//! Derived quantities:
//! * `uniform()` = `(next_u64() >> 11) · 2^-53`, in `[0, 1)`.
//! * `below(n)` = `(next_u64() · n) >> 64` (128-bit product).
//! * `normal()` = Box–Muller on two uniforms, `u1 = 1 − uniform()`:
//!   `sqrt(−2 ln u1) · cos(2π u2)`; both draws are consumed per call.
//! * `split()` = a new generator seeded with `next_u64()`.

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn split(&mut self) -> SplitMix64 {
        SplitMix64::new(self.next_u64())
    }
}
