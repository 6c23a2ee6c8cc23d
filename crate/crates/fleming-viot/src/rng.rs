//! Deterministic per-replica randomness.
//!
//! Each replica owns one ChaCha8 key derived from (base seed, scenario
//! fingerprint, particle count, replica index) via splitmix64 chaining;
//! independent purposes live on separate ChaCha streams of that key, so
//! adding draws to one purpose never perturbs the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 step: advances the state and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// The independent randomness consumers of one replica.
pub struct ReplicaRng {
    /// initial particle positions
    pub init: ChaCha8Rng,
    /// free mutation (holding times, jump targets, Brownian increments)
    pub mutation: ChaCha8Rng,
    /// global Poisson selection clock
    pub clock: ChaCha8Rng,
    /// thinning acceptance
    pub thinning: ChaCha8Rng,
    /// victim choice among particles
    pub victim: ChaCha8Rng,
    /// replacement position draw
    pub replacement: ChaCha8Rng,
}

impl ReplicaRng {
    pub fn new(base_seed: u64, fingerprint: u64, n_particles: usize, replica: u64) -> Self {
        let mut state = base_seed;
        let a = splitmix64(&mut state);
        state ^= fingerprint;
        let b = splitmix64(&mut state);
        state ^= n_particles as u64;
        let c = splitmix64(&mut state);
        state ^= replica;
        let d = splitmix64(&mut state);
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&a.to_le_bytes());
        key[8..16].copy_from_slice(&b.to_le_bytes());
        key[16..24].copy_from_slice(&c.to_le_bytes());
        key[24..].copy_from_slice(&d.to_le_bytes());
        let stream = |purpose: u64| {
            let mut r = ChaCha8Rng::from_seed(key);
            r.set_stream(purpose);
            r
        };
        Self {
            init: stream(0),
            mutation: stream(1),
            clock: stream(2),
            thinning: stream(3),
            victim: stream(4),
            replacement: stream(5),
        }
    }
}
