//! Seeded random streams.
//!
//! Every parallel worker gets its own ChaCha stream keyed by `(seed, stream id)`,
//! so results never depend on thread count or completion order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Independent stream for a worker identified by `ids`.
pub fn substream(seed: u64, ids: &[u64]) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id = 0x9E37_79B9_7F4A_7C15u64;
    for &part in ids {
        id = splitmix(id ^ part);
    }
    rng.set_stream(id);
    rng
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
