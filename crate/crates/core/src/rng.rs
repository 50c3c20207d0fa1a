//! Deterministic random number generation.
//!
//! Everything random in this crate flows from a single `u64` seed, fanned out
//! to components by labeled derivation. The generator is SplitMix64: trivially
//! portable, bit-reproducible on every platform, and more than good enough for
//! weight initialization and corpus sampling.

use crate::math;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// FNV-1a over raw bytes; used for seed-label derivation and config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a labeled subseed so independent components never share a stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    mix64(seed ^ fnv1a64(label.as_bytes()))
}

/// SplitMix64 stream.
#[derive(Clone, Debug)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { state: seed }
    }

    /// Stream derived from `seed` under a component label.
    pub fn labeled(seed: u64, label: &str) -> Self {
        DetRng::new(derive_seed(seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, n). Multiply-shift; bias is negligible at our n.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Counter-based dropout decision: keyed by seed, step, site, and element,
/// so a training run never depends on evaluation order.
pub fn dropout_keep(seed: u64, step: u64, site: u64, index: u64, rate: f64) -> bool {
    let mut h = mix64(seed ^ GOLDEN_GAMMA);
    h = mix64(h ^ step);
    h = mix64(h ^ site.wrapping_mul(0x9e37_79b9));
    h = mix64(h ^ index);
    let u = (h >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    u >= rate
}
