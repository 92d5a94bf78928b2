//! Deterministic seed derivation.

/// SplitMix64 finalizer over `base` and `index`: a well-mixed sub-seed for
/// per-sample or per-run streams.
pub fn derive(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_and_stable() {
        assert_eq!(derive(1, 2), derive(1, 2));
        assert_ne!(derive(1, 2), derive(2, 1));
        // SplitMix64 reference: first output for state 0.
        assert_eq!(derive(0, 0), 0xE220_A839_7B1D_CDAF);
    }
}
