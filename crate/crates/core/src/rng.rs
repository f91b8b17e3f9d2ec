//! Seeded, splittable random streams.
//!
//! Every consumer of randomness derives its own ChaCha8 stream from the run
//! seed plus a path of tags (purpose, epoch, sample index, ...). ChaCha is a
//! counter-mode generator, so each derived stream is independent and can be
//! recreated from its tags alone, which keeps training replayable regardless
//! of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const REGIONS: u64 = 3;
    pub const ORDER: u64 = 4;
    pub const DATA: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const CLUSTER: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream for `seed` addressed by `path`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut id = splitmix(0xD5E0_u64);
    for &p in path {
        id = splitmix(id ^ p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
