//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream so that, for example, changing the shuffle order never
//! perturbs parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 0;
pub const DATA: u64 = 1;
pub const SHUFFLE: u64 = 2;
pub const PROBE: u64 = 3;
pub const UPCYCLE: u64 = 4;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Independent stream for item `index` (a trajectory, a probe) of a seeded
/// run.
pub fn substream(seed: u64, id: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(b"substrm\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}
