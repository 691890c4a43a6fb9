//! Deterministic stream derivation. All randomness flows from one master
//! seed; each purpose gets an independent ChaCha stream keyed through a
//! splitmix64 expansion of (master, tag), so adding a consumer never
//! perturbs the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream tags. Replica `i` of a simulation-based evaluation uses
/// `REPLICA_BASE + i`.
pub mod tag {
    pub const PARAMS: u64 = 0x01;
    pub const TRAJECTORY: u64 = 0x02;
    pub const NOISE: u64 = 0x03;
    pub const REPLICA_BASE: u64 = 0x1000;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for (`master`, `tag`).
pub fn derive_stream(master: u64, tag: u64) -> ChaCha8Rng {
    let mut state = master;
    let lead = splitmix64(&mut state);
    state ^= tag.wrapping_mul(0xd1b5_4a32_d192_ed03);
    state = state.wrapping_add(lead);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
