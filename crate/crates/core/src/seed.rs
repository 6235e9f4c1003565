//! Named sub-stream derivation from a single master seed.
//!
//! Every random component (population, audience, score, noise) draws from its
//! own ChaCha stream whose seed is a pure function of the master seed and a
//! path of labels and indices. Two runs with the same master seed therefore
//! see identical streams regardless of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type AuditRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// A position in the seed tree. Cheap to copy; children are derived, never mutated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedPath(u64);

impl SeedPath {
    pub fn new(master: u64) -> Self {
        SeedPath(splitmix64(master))
    }

    pub fn child(self, label: &str) -> Self {
        SeedPath(splitmix64(self.0 ^ fnv1a(label.as_bytes()).rotate_left(17)))
    }

    pub fn index(self, i: u64) -> Self {
        SeedPath(splitmix64(self.0.wrapping_add(splitmix64(i ^ GOLDEN))))
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> AuditRng {
        AuditRng::seed_from_u64(self.0)
    }
}

/// Standard stream names.
pub mod stream {
    pub const POPULATION: &str = "population";
    pub const AUDIENCE: &str = "audience";
    pub const SCORE: &str = "score";
    pub const NOISE: &str = "noise";
}
