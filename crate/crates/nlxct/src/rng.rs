//! Seedable, splittable random streams.
//!
//! Every random decision in the toolkit draws from a stream derived from the
//! run seed by a documented rule, so determinism survives refactors that
//! reorder unrelated draws. Derivation rule:
//!
//! ```text
//! stream(seed, label, index) = ChaCha8(splitmix64(seed ^ fnv1a64(label)) ^ splitmix64(index))
//! ```
//!
//! Conventions used by the pipeline:
//!   - `("init", 0)`                   parameter initialization
//!   - `("data", order_id)`            synthetic slice generation
//!   - `("shuffle", epoch)`            per-epoch sample order
//!   - `("mask", epoch * E + step)`    MIM mask seeds for a step
//!   - `("aug", global_sample_index)`  per-sample augmentation
//!
//! Per-sample mask seeds within a batch are `base + item_index`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over a label string.
fn fnv1a64(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates nearby integers.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix a root seed, a stream label, and an index into one stream seed.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(seed ^ fnv1a64(label)) ^ splitmix64(index.wrapping_add(0x5851f42d4c957f2d))
}

/// Construct the generator for a derived stream.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_inputs_same_stream() {
        let mut a = stream(7, "init", 3);
        let mut b = stream(7, "init", 3);
        for _ in 0..16 {
            assert_eq!(a.gen::<u64>(), b.gen::<u64>());
        }
    }

    #[test]
    fn labels_and_indices_separate_streams() {
        let mut base = stream(7, "init", 0);
        let mut other_label = stream(7, "shuffle", 0);
        let mut other_index = stream(7, "init", 1);
        let x: u64 = base.gen();
        assert_ne!(x, other_label.gen::<u64>());
        let mut base2 = stream(7, "init", 0);
        let _ = base2.gen::<u64>();
        assert_ne!(base2.gen::<u64>(), other_index.gen::<u64>());
    }
}
