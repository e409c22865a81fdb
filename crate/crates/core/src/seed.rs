use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-item seed derived from a master seed, independent of scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Seed for a named stream (e.g. "qa", "tpt") of item `index`.
pub fn stream_seed(master: u64, stream: &str, index: u64) -> u64 {
    let tag = stream
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    derive_seed(master ^ tag, index)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_streams_and_indices() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_ne!(stream_seed(7, "qa", 3), stream_seed(7, "tpt", 3));
        assert_eq!(stream_seed(7, "qa", 3), stream_seed(7, "qa", 3));
    }
}
