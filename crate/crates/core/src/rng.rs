//! Hierarchical seeding: one root seed per run, split into independent child
//! streams by label so that adding a component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// A node in the seed hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree(u64);

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    pub fn child(self, label: &str) -> SeedTree {
        SeedTree(splitmix64(self.0 ^ splitmix64(fnv1a(label))))
    }

    pub fn index(self, i: u64) -> SeedTree {
        SeedTree(splitmix64(self.0.wrapping_add(splitmix64(i.wrapping_add(1)))))
    }

    pub fn rng(self) -> Rng {
        Rng::seed_from_u64(self.0)
    }
}

/// Seeded generator for a labelled component of a run.
pub fn stream(seed: u64, label: &str) -> Rng {
    SeedTree::new(seed).child(label).rng()
}
