//! Labeled sub-seed derivation from one root seed.
//!
//! Every random stage takes its seed from `derive(root, "purpose")`, so any
//! stage can be rerun on its own and adding a stage never shifts the
//! streams of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a label into a root seed (FNV-1a over the label, then a
/// splitmix64 finalizer).
pub fn derive(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

/// `derive` with a numeric suffix, e.g. per-epoch or per-seed streams.
pub fn derive_n(root: u64, label: &str, n: u64) -> u64 {
    splitmix(derive(root, label).wrapping_add(n.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
