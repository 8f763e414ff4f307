//! Keyed 64-bit mixing used wherever the reference client hashes with a
//! secret salt. Only the output distribution matters, so a fast avalanche
//! mixer is enough.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a sequence of words under `key`.
#[inline]
pub fn keyed_hash(key: u64, words: &[u64]) -> u64 {
    let mut h = mix64(key ^ GOLDEN);
    for (i, w) in words.iter().enumerate() {
        h = mix64(h ^ w.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1)));
    }
    h
}

/// Incremental FNV-style digest over a stream of words, used for event-log
/// fingerprints.
#[derive(Debug, Clone, Copy)]
pub struct StreamDigest(u64);

impl Default for StreamDigest {
    fn default() -> Self {
        StreamDigest(0xcbf2_9ce4_8422_2325)
    }
}

impl StreamDigest {
    pub fn update(&mut self, words: &[u64]) {
        for w in words {
            self.0 = mix64(self.0 ^ *w).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        mix64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_hash_depends_on_key_and_order() {
        assert_ne!(keyed_hash(1, &[1, 2]), keyed_hash(2, &[1, 2]));
        assert_ne!(keyed_hash(1, &[1, 2]), keyed_hash(1, &[2, 1]));
        assert_eq!(keyed_hash(7, &[3, 4]), keyed_hash(7, &[3, 4]));
    }

    #[test]
    fn low_bits_are_balanced() {
        let n = 200_000u64;
        let zeros = (0..n).filter(|i| keyed_hash(42, &[*i]) & 3 == 0).count() as f64;
        let frac = zeros / n as f64;
        assert!((frac - 0.25).abs() < 0.005, "{frac}");
    }
}
