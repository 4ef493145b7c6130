//! Segmenting feature vectors and quantizing them against product codebooks.
//!
//! A `D`-dimensional feature is split into `M` contiguous segments of
//! `d = D / M` dimensions. Segment `m` is compared to the `K` codewords of
//! codebook `m` by inner product. The soft path turns the scores into an
//! alpha-sharpened softmax and reconstructs the segment as the probability
//! weighted sum of codewords; the hard path keeps only the argmax index.

use crate::error::{Error, Result};
use crate::linalg::{all_finite, dot, norm};

/// Largest supported codebook size; indices are stored as one byte.
pub const MAX_CODEWORDS: usize = 256;

/// `M` codebooks of `K` codewords with `d` dimensions each, stored flat as
/// `weights[(m * K + i) * d + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    num_codebooks: usize,
    num_codewords: usize,
    sub_dim: usize,
    weights: Vec<f64>,
}

impl Codebooks {
    pub fn new(
        num_codebooks: usize,
        num_codewords: usize,
        sub_dim: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if num_codebooks == 0 || sub_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "codebooks need M >= 1 and d >= 1, got M = {num_codebooks}, d = {sub_dim}"
            )));
        }
        validate_codebook_size(num_codewords)?;
        let expected = num_codebooks * num_codewords * sub_dim;
        if weights.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "codebook weights have {} entries, expected M*K*d = {expected}",
                weights.len()
            )));
        }
        if !all_finite(&weights) {
            return Err(Error::NonFinite("codebook weights".into()));
        }
        Ok(Self {
            num_codebooks,
            num_codewords,
            sub_dim,
            weights,
        })
    }

    /// Builds codebooks for a `dim`-dimensional feature, failing unless
    /// `dim = M * d` exactly.
    pub fn for_dim(
        dim: usize,
        num_codebooks: usize,
        num_codewords: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if num_codebooks == 0 || !dim.is_multiple_of(num_codebooks) {
            return Err(Error::DimensionMismatch(format!(
                "feature dimension {dim} is not divisible by M = {num_codebooks}"
            )));
        }
        Self::new(num_codebooks, num_codewords, dim / num_codebooks, weights)
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }

    /// Full feature dimension `D = M * d`.
    pub fn dim(&self) -> usize {
        self.num_codebooks * self.sub_dim
    }

    #[inline]
    pub fn codeword(&self, m: usize, i: usize) -> &[f64] {
        let start = (m * self.num_codewords + i) * self.sub_dim;
        &self.weights[start..start + self.sub_dim]
    }

    #[inline]
    pub fn codeword_mut(&mut self, m: usize, i: usize) -> &mut [f64] {
        let start = (m * self.num_codewords + i) * self.sub_dim;
        &mut self.weights[start..start + self.sub_dim]
    }

    /// All codewords of codebook `m`, `K * d` values.
    pub fn codebook(&self, m: usize) -> &[f64] {
        let len = self.num_codewords * self.sub_dim;
        &self.weights[m * len..(m + 1) * len]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

/// Checks that `K` is a power of two no larger than [`MAX_CODEWORDS`].
pub fn validate_codebook_size(num_codewords: usize) -> Result<()> {
    if !num_codewords.is_power_of_two() || num_codewords > MAX_CODEWORDS {
        return Err(Error::InvalidParameter(format!(
            "K must be a power of two in [1, {MAX_CODEWORDS}], got {num_codewords}"
        )));
    }
    Ok(())
}

/// Soft assignment of one feature: an `M x K` row-stochastic probability
/// table and the concatenated reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    num_codewords: usize,
    probs: Vec<f64>,
    reconstruction: Vec<f64>,
}

impl SoftAssignment {
    /// Probabilities over the codewords of codebook `m`.
    pub fn probs(&self, m: usize) -> &[f64] {
        &self.probs[m * self.num_codewords..(m + 1) * self.num_codewords]
    }

    pub fn all_probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn reconstruction(&self) -> &[f64] {
        &self.reconstruction
    }

    pub fn num_codebooks(&self) -> usize {
        self.probs.len() / self.num_codewords
    }

    /// Index of the most probable codeword per codebook (lowest index on ties).
    pub fn argmax(&self) -> HardCode {
        let indices = (0..self.num_codebooks())
            .map(|m| argmax_lowest(self.probs(m)) as u8)
            .collect();
        HardCode { indices }
    }
}

/// Codeword indices of one hard-quantized feature, one byte per codebook.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HardCode {
    pub indices: Vec<u8>,
}

impl HardCode {
    /// Validates the code against codebook shape.
    pub fn new(indices: Vec<u8>, num_codebooks: usize, num_codewords: usize) -> Result<Self> {
        if indices.len() != num_codebooks {
            return Err(Error::DimensionMismatch(format!(
                "code has {} indices, expected M = {num_codebooks}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= num_codewords) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                size: num_codewords,
            });
        }
        Ok(Self { indices })
    }
}

/// Splits `z` into `num_segments` contiguous, order-preserving segments.
pub fn segment(z: &[f64], num_segments: usize) -> Result<Vec<&[f64]>> {
    if num_segments == 0 || !z.len().is_multiple_of(num_segments) {
        return Err(Error::DimensionMismatch(format!(
            "length {} is not divisible by M = {num_segments}",
            z.len()
        )));
    }
    if !all_finite(z) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(z.chunks_exact(z.len() / num_segments).collect())
}

/// Returns `v / ||v||`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if !all_finite(v) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::ZeroNorm("feature vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_feature(z: &[f64], codebooks: &Codebooks) -> Result<()> {
    if z.len() != codebooks.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature has {} dims, codebooks cover {}",
            z.len(),
            codebooks.dim()
        )));
    }
    if !all_finite(z) {
        return Err(Error::NonFinite("feature vector".into()));
    }
    Ok(())
}

/// Writes the alpha-softmax of `alpha * <segment, c_i>` into `out`.
pub(crate) fn softmax_scores(segment: &[f64], codebook: &[f64], alpha: f64, out: &mut [f64]) {
    let d = segment.len();
    let mut max = f64::NEG_INFINITY;
    for (o, c) in out.iter_mut().zip(codebook.chunks_exact(d)) {
        *o = alpha * dot(segment, c);
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Soft quantization of `z` (already normalized by the caller if desired).
pub fn soft_quantize(z: &[f64], codebooks: &Codebooks, alpha: f64) -> Result<SoftAssignment> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    check_feature(z, codebooks)?;
    let (m_count, k, d) = (
        codebooks.num_codebooks(),
        codebooks.num_codewords(),
        codebooks.sub_dim(),
    );
    let mut probs = vec![0.0; m_count * k];
    let mut reconstruction = vec![0.0; m_count * d];
    for m in 0..m_count {
        let seg = &z[m * d..(m + 1) * d];
        let row = &mut probs[m * k..(m + 1) * k];
        softmax_scores(seg, codebooks.codebook(m), alpha, row);
        let out = &mut reconstruction[m * d..(m + 1) * d];
        for (i, &p) in row.iter().enumerate() {
            crate::linalg::axpy(p, codebooks.codeword(m, i), out);
        }
    }
    Ok(SoftAssignment {
        num_codewords: k,
        probs,
        reconstruction,
    })
}

/// Hard quantization: per segment, the index of the codeword with the largest
/// inner product, lowest index on ties.
pub fn hard_quantize(z: &[f64], codebooks: &Codebooks) -> Result<HardCode> {
    check_feature(z, codebooks)?;
    let d = codebooks.sub_dim();
    let indices = (0..codebooks.num_codebooks())
        .map(|m| {
            let seg = &z[m * d..(m + 1) * d];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (i, c) in codebooks.codebook(m).chunks_exact(d).enumerate() {
                let s = dot(seg, c);
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    Ok(HardCode { indices })
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_codewords() -> Codebooks {
        Codebooks::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn segment_examples() {
        let z = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(segment(&z, 2).unwrap(), vec![&[1.0, 2.0][..], &[3.0, 4.0][..]]);
        assert_eq!(segment(&[5.0], 1).unwrap(), vec![&[5.0][..]]);
        let long = vec![0.5; 768];
        let segs = segment(&long, 8).unwrap();
        assert_eq!(segs.len(), 8);
        assert!(segs.iter().all(|s| s.len() == 96));
    }

    #[test]
    fn segment_rejects_indivisible_and_non_finite() {
        assert!(matches!(segment(&[1.0, 2.0, 3.0], 2), Err(Error::DimensionMismatch(_))));
        assert!(matches!(segment(&[1.0, f64::NAN], 2), Err(Error::NonFinite(_))));
    }

    #[test]
    fn codebooks_reject_bad_shapes() {
        assert!(Codebooks::for_dim(10, 3, 2, vec![0.0; 12]).is_err());
        assert!(Codebooks::new(1, 3, 2, vec![0.0; 6]).is_err());
        assert!(Codebooks::new(1, 512, 1, vec![0.0; 512]).is_err());
        assert!(Codebooks::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Codebooks::new(1, 2, 1, vec![0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn soft_quantize_two_codewords() {
        // exp(1) / (exp(1) + exp(0))
        let expected = 1.0 / (1.0 + (-1.0f64).exp());
        let sa = soft_quantize(&[1.0, 0.0], &two_codewords(), 1.0).unwrap();
        assert_abs_diff_eq!(sa.probs(0)[0], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(sa.probs(0)[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(sa.probs(0)[1], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(sa.reconstruction()[0], expected, epsilon = 1e-15);
        assert_abs_diff_eq!(sa.reconstruction()[1], 1.0 - expected, epsilon = 1e-15);
    }

    #[test]
    fn soft_quantize_sharp_alpha_approaches_hard() {
        let sa = soft_quantize(&[1.0, 0.0], &two_codewords(), 1000.0).unwrap();
        assert!(sa.probs(0)[0] >= 0.999);
        assert_abs_diff_eq!(sa.reconstruction()[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(sa.reconstruction()[1], 0.0, epsilon = 1e-3);
    }

    #[test]
    fn soft_quantize_uniform_when_scores_tie() {
        let cb = Codebooks::new(1, 4, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]).unwrap();
        let sa = soft_quantize(&[0.0, 0.0], &cb, 10.0).unwrap();
        for p in sa.probs(0) {
            assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn soft_quantize_errors() {
        let cb = two_codewords();
        assert!(matches!(soft_quantize(&[1.0, 0.0], &cb, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(soft_quantize(&[1.0, 0.0], &cb, -1.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(soft_quantize(&[f64::NAN, 0.0], &cb, 1.0), Err(Error::NonFinite(_))));
        assert!(matches!(soft_quantize(&[1.0], &cb, 1.0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn hard_quantize_examples() {
        assert_eq!(hard_quantize(&[1.0, 0.0], &two_codewords()).unwrap().indices, vec![0]);

        // Two codebooks of 8 orthonormal codewords in R^8.
        let mut w = vec![0.0; 2 * 8 * 8];
        for m in 0..2 {
            for i in 0..8 {
                w[(m * 8 + i) * 8 + i] = 1.0;
            }
        }
        let cb = Codebooks::new(2, 8, 8, w).unwrap();
        let mut z = cb.codeword(0, 3).to_vec();
        z.extend_from_slice(cb.codeword(1, 7));
        assert_eq!(hard_quantize(&z, &cb).unwrap().indices, vec![3, 7]);
    }

    #[test]
    fn hard_quantize_ties_pick_lowest_index() {
        let cb = Codebooks::new(1, 4, 2, vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(hard_quantize(&[1.0, 0.0], &cb).unwrap().indices, vec![1]);
        assert!(matches!(
            hard_quantize(&[f64::INFINITY, 0.0], &cb),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn hard_code_validation() {
        assert!(HardCode::new(vec![1, 2], 2, 4).is_ok());
        assert!(matches!(HardCode::new(vec![1], 2, 4), Err(Error::DimensionMismatch(_))));
        assert!(matches!(
            HardCode::new(vec![1, 4], 2, 4),
            Err(Error::IndexOutOfRange { index: 4, size: 4 })
        ));
    }

    fn codebooks_strategy() -> impl Strategy<Value = (Codebooks, Vec<f64>)> {
        (1usize..4, 0u32..5, 1usize..5).prop_flat_map(|(m, log_k, d)| {
            let k = 1usize << log_k;
            (
                prop::collection::vec(-2.0f64..2.0, m * k * d),
                prop::collection::vec(-2.0f64..2.0, m * d),
            )
                .prop_map(move |(w, z)| (Codebooks::new(m, k, d, w).unwrap(), z))
        })
    }

    proptest! {
        #[test]
        fn probs_are_row_stochastic((cb, z) in codebooks_strategy(), alpha in 0.01f64..50.0) {
            let sa = soft_quantize(&z, &cb, alpha).unwrap();
            for m in 0..cb.num_codebooks() {
                let s: f64 = sa.probs(m).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn soft_argmax_matches_hard((cb, z) in codebooks_strategy(), alpha in 0.01f64..50.0) {
            let sa = soft_quantize(&z, &cb, alpha).unwrap();
            let hard = hard_quantize(&z, &cb).unwrap();
            // Distinct scores can collapse to equal probabilities only when
            // they differ by less than the softmax resolution; skip those.
            let d = cb.sub_dim();
            for m in 0..cb.num_codebooks() {
                let seg = &z[m * d..(m + 1) * d];
                let mut scores: Vec<f64> = (0..cb.num_codewords())
                    .map(|i| dot(seg, cb.codeword(m, i)))
                    .collect();
                scores.sort_by(|a, b| b.total_cmp(a));
                if scores.len() > 1 && (scores[0] - scores[1]).abs() < 1e-9 {
                    return Ok(());
                }
            }
            prop_assert_eq!(sa.argmax(), hard);
        }

        #[test]
        fn reconstruction_in_convex_hull((cb, z) in codebooks_strategy(), alpha in 0.01f64..50.0) {
            let sa = soft_quantize(&z, &cb, alpha).unwrap();
            let d = cb.sub_dim();
            for m in 0..cb.num_codebooks() {
                let r = norm(&sa.reconstruction()[m * d..(m + 1) * d]);
                let max = (0..cb.num_codewords())
                    .map(|i| norm(cb.codeword(m, i)))
                    .fold(0.0, f64::max);
                prop_assert!(r <= max + 1e-12);
            }
        }

        #[test]
        fn segment_round_trips(
            (z, m) in (1usize..8, 1usize..9)
                .prop_flat_map(|(m, d)| (prop::collection::vec(-1e6f64..1e6, m * d), Just(m)))
        ) {
            let joined: Vec<f64> = segment(&z, m).unwrap().concat();
            prop_assert_eq!(joined, z);
        }
    }
}
