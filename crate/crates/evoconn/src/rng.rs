//! Deterministic counter-based random number generation.
//!
//! Every random quantity in this crate is keyed by an explicit tuple of
//! 64-bit words -- for connection sampling that tuple is
//! `(generation seed, population index, block id, entry offset)` -- instead
//! of being drawn from a shared mutable stream. Identical keys give
//! identical values on any platform and under any evaluation order, which
//! is what lets populations be reconstructed from seeds alone: on a remote
//! worker, or inside the update pass, without ever storing or transmitting
//! sampled connection matrices.
//!
//! The generator is part of the compatibility contract of checkpoints and
//! of the coordinator/worker protocol, so it is fixed here and must not
//! change between versions:
//!
//! * key folding: starting from 0, each key word `w` is absorbed with
//!   `state = mix64(state + GOLDEN_GAMMA + w)` (wrapping arithmetic);
//! * stream: repeated `state += GOLDEN_GAMMA; output mix64(state)`
//!   (the SplitMix64 sequence);
//! * `mix64` is the SplitMix64 finalizer (Stafford variant 13);
//! * uniforms take the top 53 bits; normals are Box-Muller over two
//!   uniforms.

/// Weyl-sequence increment used by SplitMix64 (2^64 / phi, odd).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer. Bijective on u64 with strong avalanche.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a key tuple into a single 64-bit stream state.
#[inline]
pub fn fold_key(words: &[u64]) -> u64 {
    let mut state = 0u64;
    for &w in words {
        state = mix64(state.wrapping_add(GOLDEN_GAMMA).wrapping_add(w));
    }
    state
}

/// Convenience: fold a key and return the first stream output.
#[inline]
pub fn derive(words: &[u64]) -> u64 {
    CounterRng::from_key(words).next_u64()
}

/// A stateless-by-construction random stream: the state is fully determined
/// by the key it was created from, and each output is a pure function of
/// (key, position).
#[derive(Clone, Debug)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn from_key(words: &[u64]) -> Self {
        CounterRng {
            state: fold_key(words),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in `[-1, 1)`.
    #[inline]
    pub fn next_symmetric(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    /// Bernoulli draw; consumes one stream output.
    #[inline]
    pub fn next_bool(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller; consumes two stream outputs.
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

// Domain-separation tags so unrelated draws never share a key.
pub const TAG_GENERATION: u64 = 0x01;
pub const TAG_EPISODE: u64 = 0x02;
pub const TAG_ELITE: u64 = 0x03;
pub const TAG_ENV: u64 = 0x04;
pub const TAG_TARGET: u64 = 0x05;
pub const TAG_BENCH: u64 = 0x06;
