//! Named, order-independent random substreams derived from one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashes `seed` with a substream name and integer coordinates.
pub fn derive_seed(seed: u64, name: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(name.as_bytes()));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream(seed: u64, name: &str, coords: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name, coords))
}

/// Seed of the local-training stream of one silo in one round.
pub fn silo_round_seed(global_seed: u64, silo_id: usize, round: usize) -> u64 {
    derive_seed(global_seed, "silo-round", &[silo_id as u64, round as u64])
}
