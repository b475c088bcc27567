//! Deterministic, counter-based RNG streams.
//!
//! Every Monte-Carlo replica draws from its own ChaCha stream keyed by
//! `(seed, experiment, replica)`, so results do not depend on scheduling and
//! re-running with the same inputs is bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for one replica of one experiment.
pub fn replica_rng(seed: u64, experiment: u64, replica: u64) -> ChaCha12Rng {
    let mut state = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(experiment.rotate_left(17))
        .wrapping_add(replica.rotate_left(43));
    // decorrelate the three inputs before expanding into a key
    state ^= experiment.wrapping_mul(0xd605_bbb5_8c8e_c2f5) ^ replica;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Stable identifiers for experiment families, used as the `experiment`
/// component of the seeding ladder.
pub mod stream {
    pub const POPSIM: u64 = 1;
    pub const SPINE: u64 = 2;
    pub const HOM_SPINE: u64 = 3;
    pub const LIMIT_SPINE: u64 = 4;
    pub const WEIGHTED_LIMIT: u64 = 5;
    pub const STAR_SPINE: u64 = 6;
    pub const COUPLING: u64 = 7;
    pub const GENERATOR_CHECK: u64 = 8;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = replica_rng(7, 1, 0);
        let mut b = replica_rng(7, 1, 0);
        assert_eq!(a.next_u64(), b.next_u64());

        let mut c = replica_rng(7, 1, 1);
        let mut d = replica_rng(7, 2, 0);
        let x = replica_rng(7, 1, 0).next_u64();
        assert_ne!(x, c.next_u64());
        assert_ne!(x, d.next_u64());
    }
}
