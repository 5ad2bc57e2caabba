use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent, reproducible stream from a base seed and a key.
pub(crate) fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in key {
        h = splitmix(h ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
