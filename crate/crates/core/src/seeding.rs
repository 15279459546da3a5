//! Seed derivation for independent, individually reproducible streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream generator used everywhere randomness is drawn.
pub type StreamRng = ChaCha8Rng;

/// Which consumer a derived stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamRole {
    Patient = 0,
    Controller = 1,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(master, controller, replication, role)` into one 64-bit seed.
pub fn derive_seed(master: u64, controller: usize, replication: usize, role: StreamRole) -> u64 {
    let mut h = splitmix64(master);
    for part in [controller as u64, replication as u64, role as u64] {
        h = splitmix64(h ^ splitmix64(part.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// Patient noise for replication `r`, shared by every controller so that
/// controllers are compared on the same adherence draws.
pub fn patient_seed(master: u64, replication: usize) -> u64 {
    derive_seed(master, usize::MAX, replication, StreamRole::Patient)
}

pub fn rng_from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
