//! Deterministic seed derivation.
//!
//! Every random choice in the pipeline draws from a ChaCha stream whose seed is
//! derived from the master seed plus a tag and a list of indices, so results do
//! not depend on scheduling or on which stages are re-run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master`, a textual tag and an index path into a new 64-bit seed.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    // FNV-1a over the tag keeps the derivation stable across platforms.
    let mut tag_hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        tag_hash ^= u64::from(b);
        tag_hash = tag_hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut state = splitmix64(master ^ splitmix64(tag_hash));
    for &i in indices {
        state = splitmix64(state ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    state
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
