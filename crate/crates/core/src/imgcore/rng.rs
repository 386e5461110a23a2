use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Run seed. Independent streams are forked from it by purpose label and index,
/// so drawing noise never perturbs weight initialisation and vice versa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Default for Seed {
    fn default() -> Self {
        Seed(0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Seed {
    /// Stream key for `(self, purpose, index)`.
    pub fn derive(&self, purpose: &str, index: u64) -> u64 {
        let a = splitmix64(self.0);
        let b = splitmix64(a ^ fnv1a(purpose.as_bytes()));
        splitmix64(b ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
    }

    pub fn rng(&self, purpose: &str, index: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.derive(purpose, index))
    }
}
