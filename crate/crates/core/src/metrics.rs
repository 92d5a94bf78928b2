//! Entropy and similarity measures for comparing masking strategies.
//!
//! Entropy is computed over the 8-bit luma histogram of an image on the
//! `[0, 1]` scale. Similarity is the cosine of non-negative pooled deep
//! features from an injectable extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize_unit, Image};
use crate::masking::{MaskedImage, Strategy};

/// BT.601 luma weights.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// 8-bit intensities of an image: the single channel as is, or luma for RGB.
pub fn intensities(image: &Image) -> Result<Vec<u8>> {
    match image.channels() {
        1 => Ok(image.plane(0).iter().map(|&v| quantize_unit(v)).collect()),
        3 => {
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            Ok(r.iter()
                .zip(g)
                .zip(b)
                .map(|((&r, &g), &b)| quantize_unit(LUMA[0] * r + LUMA[1] * g + LUMA[2] * b))
                .collect())
        }
        c => Err(Error::Domain(format!(
            "entropy needs a 1- or 3-channel image, got {c} channels"
        ))),
    }
}

/// Shannon entropy in bits of the 256-bin intensity histogram.
pub fn shannon_entropy(image: &Image) -> Result<f64> {
    let values = intensities(image)?;
    histogram_entropy(&values)
}

/// Entropy of a list of 8-bit values; `0·log 0` counts as 0.
pub fn histogram_entropy(values: &[u8]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("entropy of an empty image".into()));
    }
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let n = values.len() as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    Ok(h.max(0.0))
}

/// `H(reuse) − H(masked)`.
pub fn entropy_delta(masked: &MaskedImage, reuse_resized: &Image) -> Result<f64> {
    Ok(shannon_entropy(reuse_resized)? - shannon_entropy(&masked.pixels)?)
}

/// Maps an image to a flat, non-negative feature vector.
pub trait FeatureExtractor {
    fn features(&self, image: &Image) -> Result<Vec<f32>>;
}

impl<F> FeatureExtractor for F
where
    F: Fn(&Image) -> Result<Vec<f32>>,
{
    fn features(&self, image: &Image) -> Result<Vec<f32>> {
        self(image)
    }
}

/// Cosine similarity of two non-negative feature vectors, in `[0, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "feature vectors differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain(
            "similarity needs finite non-negative features".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity(
            "a feature vector is all zeros".into(),
        ));
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

/// Deep-feature similarity of two images under `extractor`.
pub fn deep_similarity(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<f64> {
    cosine_similarity(&extractor.features(a)?, &extractor.features(b)?)
}

/// `exp(−|s_ds − s_a|)`: 1 at the anchor, decaying symmetrically.
pub fn similarity_score(s_ds: f64, s_a: f64) -> f64 {
    (-(s_ds - s_a).abs()).exp()
}

/// Per-image analysis values for one strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRecord {
    pub strategy: Strategy,
    /// Entropy of the masked image (bits).
    pub h_m: f64,
    /// Entropy of the resized reuse image (bits).
    pub h_c: f64,
    pub delta_h: f64,
    /// Deep-feature cosine similarity of original and reuse image.
    pub s_ds: f64,
    pub s: f64,
}

impl AnalysisRecord {
    pub fn new(strategy: Strategy, h_m: f64, h_c: f64, s_ds: f64, s_a: f64) -> Self {
        Self {
            strategy,
            h_m,
            h_c,
            delta_h: h_c - h_m,
            s_ds,
            s: similarity_score(s_ds, s_a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FScoreConfig {
    pub w1: f64,
    pub w2: f64,
    /// Anchor similarity.
    pub s_a: f64,
    /// Number of images (pairs) drawn from a corpus.
    pub pairs: usize,
}

impl Default for FScoreConfig {
    fn default() -> Self {
        Self {
            w1: 0.5,
            w2: 0.5,
            s_a: 0.5,
            pairs: 1000,
        }
    }
}

impl FScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w1 < 0.0 || self.w2 < 0.0 || !self.w1.is_finite() || !self.w2.is_finite() {
            return Err(Error::Config("score weights must be finite and non-negative".into()));
        }
        if !self.s_a.is_finite() {
            return Err(Error::Config("anchor similarity must be finite".into()));
        }
        if self.pairs == 0 {
            return Err(Error::Config("pair count must be positive".into()));
        }
        Ok(())
    }
}

/// Mean of `w1·S + w2·ΔH` over the records.
pub fn f_score(records: &[AnalysisRecord], config: &FScoreConfig) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Domain("F score of an empty record list".into()));
    }
    let total: f64 = records
        .iter()
        .map(|r| config.w1 * r.s + config.w2 * r.delta_h)
        .sum();
    Ok(total / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::{
        cosine_similarity, deep_similarity, entropy_delta, f_score, histogram_entropy, intensities,
        shannon_entropy, similarity_score, AnalysisRecord, Error, FScoreConfig, Image, Result,
    };
    use crate::masking::{apply_mask, generate_patch_mask};
    use crate::masking::Strategy;
    use proptest::prelude::*;

    fn record(s: f64, delta_h: f64) -> AnalysisRecord {
        AnalysisRecord {
            strategy: Strategy::Patch,
            h_m: 0.0,
            h_c: delta_h,
            delta_h,
            s_ds: 0.5,
            s,
        }
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(shannon_entropy(&Image::filled(1, 8, 8, 0.3)).unwrap(), 0.0);
        let checker = Image::from_fn(1, 16, 16, |_, y, x| ((x + y) % 2) as f32);
        assert!((shannon_entropy(&checker).unwrap() - 1.0).abs() < 1e-12);
        let uniform = Image::from_fn(1, 16, 16, |_, y, x| (y * 16 + x) as f32 / 255.0);
        assert!((shannon_entropy(&uniform).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn rgb_uses_luma() {
        // Pure gray images have luma equal to the gray level.
        let gray = Image::from_fn(3, 4, 4, |_, y, _| if y < 2 { 0.0 } else { 1.0 });
        assert!((shannon_entropy(&gray).unwrap() - 1.0).abs() < 1e-12);
        let v = intensities(&Image::from_fn(3, 1, 1, |c, _, _| [1.0, 0.0, 0.0][c])).unwrap();
        assert_eq!(v, vec![76]); // round(0.299 * 255)
        assert!(shannon_entropy(&Image::zeros(2, 2, 2)).is_err());
        assert!(histogram_entropy(&[]).is_err());
    }

    #[test]
    fn entropy_delta_cases() {
        let img = Image::from_fn(1, 8, 8, |_, y, x| ((x * 3 + y) % 7) as f32 / 7.0);
        let spec = generate_patch_mask((8, 8), 4, 0.25, 0).unwrap();
        let masked = apply_mask(&img, &spec, 0.0).unwrap();
        assert_eq!(entropy_delta(&masked, &masked.pixels).unwrap(), 0.0);

        let constant = apply_mask(&Image::filled(1, 8, 8, 0.0), &spec, 0.0).unwrap();
        let coin = Image::from_fn(1, 8, 8, |_, y, _| (y % 2) as f32);
        assert!((entropy_delta(&constant, &coin).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity(_))
        ));
        assert!(cosine_similarity(&[-1.0], &[1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn deep_similarity_with_stub_extractors() {
        let a = Image::filled(1, 2, 2, 0.2);
        let b = Image::filled(1, 2, 2, 0.9);
        let mean = |img: &Image| -> Result<Vec<f32>> { Ok(vec![img.data()[0], 1.0]) };
        assert!((deep_similarity(&a, &a, &mean).unwrap() - 1.0).abs() < 1e-6);
        let split = |img: &Image| -> Result<Vec<f32>> {
            Ok(if img.data()[0] < 0.5 { vec![1.0, 0.0] } else { vec![0.0, 1.0] })
        };
        assert_eq!(deep_similarity(&a, &b, &split).unwrap(), 0.0);
    }

    #[test]
    fn similarity_score_values() {
        assert_eq!(similarity_score(0.5, 0.5), 1.0);
        assert!((similarity_score(1.0, 0.5) - 0.606_530_659_712_633_4).abs() < 1e-9);
        assert_eq!(similarity_score(0.0, 0.5), similarity_score(1.0, 0.5));
    }

    #[test]
    fn f_score_cases() {
        let cfg = FScoreConfig::default();
        assert_eq!(f_score(&[record(1.0, 1.0)], &cfg).unwrap(), 1.0);
        assert_eq!(f_score(&[record(0.0, 0.0); 3], &cfg).unwrap(), 0.0);
        assert_eq!(f_score(&[record(1.0, 0.0), record(0.0, 1.0)], &cfg).unwrap(), 0.5);
        assert!(matches!(f_score(&[], &cfg), Err(Error::Domain(_))));
        let bad = FScoreConfig { w1: -1.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_bounded_and_permutation_invariant(
            values in proptest::collection::vec(0u8..=255, 1..300),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let h = histogram_entropy(&values).unwrap();
            prop_assert!((0.0..=8.0).contains(&h));
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(histogram_entropy(&shuffled).unwrap(), h);
        }

        #[test]
        fn similarity_score_peak_and_symmetry(s_a in -2.0f64..2.0, d in 0.0f64..3.0) {
            let up = similarity_score(s_a + d, s_a);
            prop_assert!((up - similarity_score(s_a - d, s_a)).abs() < 1e-12);
            prop_assert!(up > 0.0 && up <= 1.0);
            prop_assert!(up <= similarity_score(s_a + d / 2.0, s_a));
        }

        #[test]
        fn f_score_scales_linearly_in_delta_h(
            pairs in proptest::collection::vec((0.0f64..1.0, -3.0f64..3.0), 1..20),
            c in 0.1f64..5.0,
        ) {
            let cfg = FScoreConfig { w1: 0.0, ..FScoreConfig::default() };
            let base: Vec<_> = pairs.iter().map(|&(s, d)| record(s, d)).collect();
            let scaled: Vec<_> = pairs.iter().map(|&(s, d)| record(s, c * d)).collect();
            let a = f_score(&base, &cfg).unwrap();
            let b = f_score(&scaled, &cfg).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
