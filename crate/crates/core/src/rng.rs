//! Deterministic random streams. Every consumer derives its own stream from
//! the run seed plus a purpose tag, so adding, removing, or reordering draws
//! in one code path can never shift the values another path sees. That
//! isolation is what makes "skip this loss branch" transformations exactly
//! equivalent to "weight this loss branch by zero".

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer — a cheap, well-mixed 64-bit hash step.
fn mix(mut h: u64) -> u64 {
    h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Derive a child seed from a base seed and a path of purpose tags.
/// Tag content and order both matter; empty paths return a mix of the seed
/// itself so `derive_seed(s, &[])` never collides with a tagged stream.
pub fn derive_seed(seed: u64, tags: &[&str]) -> u64 {
    let mut h = mix(seed ^ 0x42ae_5101_93ac_c5f1);
    for tag in tags {
        for &b in tag.as_bytes() {
            h = mix(h ^ u64::from(b));
        }
        h = mix(h ^ 0xff); // tag separator: ("ab","c") ≠ ("a","bc")
    }
    h
}

/// A fresh deterministic generator for one purpose.
pub fn stream(seed: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a: Vec<u64> = stream(7, &["x", "y"]).sample_iter(rand::distributions::Standard).take(4).collect();
        let b: Vec<u64> = stream(7, &["x", "y"]).sample_iter(rand::distributions::Standard).take(4).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn tag_order_and_boundaries_matter() {
        assert_ne!(derive_seed(7, &["x", "y"]), derive_seed(7, &["y", "x"]));
        assert_ne!(derive_seed(7, &["ab", "c"]), derive_seed(7, &["a", "bc"]));
        assert_ne!(derive_seed(7, &[]), derive_seed(7, &[""]));
        assert_ne!(derive_seed(7, &["x"]), derive_seed(8, &["x"]));
    }

    #[test]
    fn sibling_streams_are_independent_of_consumption() {
        // Drawing any amount from one stream leaves a sibling untouched —
        // trivially true since each derives a fresh generator, which is the
        // point of the design.
        let mut noisy = stream(3, &["branch-a"]);
        let _ = noisy.gen::<[u64; 8]>();
        let before: u64 = stream(3, &["branch-b"]).gen();
        let _ = noisy.gen::<[u64; 8]>();
        let after: u64 = stream(3, &["branch-b"]).gen();
        assert_eq!(before, after);
    }

    #[test]
    fn frozen_values_guard_against_accidental_rehash() {
        // If the derivation scheme changes, every checkpoint and golden file
        // in the repository silently invalidates; pin two values.
        assert_eq!(derive_seed(0, &[]), 0x4d5b_a03d_ff88_36ea);
        assert_eq!(derive_seed(1, &["corpus"]), 0x803d_5a04_e887_f440);
    }
}
