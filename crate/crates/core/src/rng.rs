//! Seed derivation. Every random stream in the crate is keyed from an
//! explicit root seed through these helpers, so results never depend on
//! call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a parent seed and a list of labels.
pub fn derive_seed(root: u64, labels: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"semcert/seed/v1");
    hasher.update(root.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two uniforms in `[0, 1)` drawn from a stream keyed by `key`.
///
/// FNV-1a over the key followed by SplitMix64 finalisation. Cheap enough to
/// call once per verdict and identical on every platform.
pub fn keyed_uniforms(seed: u64, key: &[&[u8]]) -> (f64, f64) {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for part in key {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        // Separator so ("ab","c") and ("a","bc") differ.
        h ^= 0xff;
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut state = h;
    let a = splitmix64(&mut state);
    let b = splitmix64(&mut state);
    (to_unit(a), to_unit(b))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_separates_labels() {
        assert_ne!(derive_seed(1, &[b"ab", b"c"]), derive_seed(1, &[b"a", b"bc"]));
        assert_ne!(derive_seed(1, &[b"x"]), derive_seed(2, &[b"x"]));
        assert_eq!(derive_seed(7, &[b"x"]), derive_seed(7, &[b"x"]));
    }

    #[test]
    fn keyed_uniforms_are_in_unit_interval_and_roughly_uniform() {
        let n = 20_000;
        let mut sum = 0.0;
        for i in 0..n {
            let (a, b) = keyed_uniforms(3, &[b"term", &(i as u64).to_le_bytes()]);
            assert!((0.0..1.0).contains(&a) && (0.0..1.0).contains(&b));
            sum += a + b;
        }
        let mean = sum / (2 * n) as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }
}
