//! Derived random streams.
//!
//! Every random decision in a run is drawn from a ChaCha stream keyed by the
//! run seed plus a purpose tag and indices, so results do not depend on the
//! order in which parallel workers execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags; kept distinct so streams never collide across uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Topology = 1,
    Prototypes = 2,
    Partition = 3,
    TestPool = 4,
    Init = 5,
    Assignment = 6,
    LocalTrain = 7,
    Fuzz = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed, a purpose and a list of indices into one 64-bit key.
pub fn derive_seed(root: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix(root ^ splitmix(stream as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn derive_rng(root: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, indices))
}
