//! Seeded, splittable random streams.
//!
//! Every stochastic consumer asks for its own stream by a path of labels
//! (`root.split("dropout").split(epoch)`), so the numbers one consumer sees
//! never depend on how many draws another consumer made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Anything that can name a child stream.
pub trait StreamLabel {
    fn label_hash(&self) -> u64;
}

impl StreamLabel for &str {
    fn label_hash(&self) -> u64 {
        fnv1a(self)
    }
}

impl StreamLabel for u64 {
    fn label_hash(&self) -> u64 {
        mix(*self ^ 0x5555_5555_5555_5555)
    }
}

impl StreamLabel for usize {
    fn label_hash(&self) -> u64 {
        (*self as u64).label_hash()
    }
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { key: mix(seed) }
    }

    pub fn split(&self, label: impl StreamLabel) -> Self {
        Self {
            key: mix(self.key.rotate_left(17) ^ label.label_hash()),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }

    pub fn seed(&self) -> u64 {
        self.key
    }
}
