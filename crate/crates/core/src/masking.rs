//! Training-time masks.
//!
//! * [`naive_copy_mask`] recycles empirical missingness rows: each row adopts
//!   the observed mask of a randomly permuted partner with probability
//!   `p_cm`, unless that would leave it without any jointly observed feature.
//! * [`mtcm_build_batch`] turns a batch of copy masks into encoder token
//!   sets, truncating every sample to the batch's (lower) median observed
//!   count so null padding never exceeds half of the batch.
//! * [`copy_mask_batch`] is the untruncated variant used by the naive
//!   copy-masking arm, and [`random_mask`] the uniform masking arm.
//!
//! Effective observability of a cell is always `observed && copy_mask`.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::Mask;
use crate::rng::Stream;

/// Masking ratio and seed for copy masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopyMaskConfig {
    pub p_cm: f64,
    pub seed: u64,
}

impl Default for CopyMaskConfig {
    fn default() -> Self {
        CopyMaskConfig { p_cm: 0.9, seed: 0 }
    }
}

/// How training batches pick encoder tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Copy masking with median truncation.
    Mtcm,
    /// Copy masking, every remaining observed feature is kept.
    NaiveCm,
    /// Uniform random masking of observed cells.
    Random,
}

/// One training batch after masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub sample_ids: Vec<usize>,
    /// B×K copy mask rows (for random masking: membership of the kept set).
    pub copy_mask: Array2<bool>,
    /// Encoder columns per sample, in token order.
    pub observed_sets: Vec<Vec<usize>>,
    /// Observed-but-hidden columns per sample, ascending.
    pub masked_sets: Vec<Vec<usize>>,
    pub o_trunc: Vec<usize>,
    /// Encoder sequence length; the batch median under MT-CM.
    pub seq_len: usize,
    pub pad_counts: Vec<usize>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Share of encoder slots filled with null tokens.
    pub fn pad_fraction(&self) -> f64 {
        let total = self.len() * self.seq_len;
        if total == 0 {
            return 0.0;
        }
        self.pad_counts.iter().sum::<usize>() as f64 / total as f64
    }

    /// Checks the structural invariants against the true observed rows.
    pub fn validate(&self, observed: ArrayView2<'_, bool>) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("masked batch: {msg}")));
        if observed.nrows() != self.len() {
            return bad(format!("{} rows for {} samples", observed.nrows(), self.len()));
        }
        for n in 0..self.len() {
            let obs = &self.observed_sets[n];
            let masked = &self.masked_sets[n];
            if obs.is_empty() {
                return bad(format!("sample {n} has no encoder tokens"));
            }
            if obs.len() != self.o_trunc[n] || obs.len() > self.seq_len {
                return bad(format!("sample {n} token count {} out of range", obs.len()));
            }
            if obs.len() + self.pad_counts[n] != self.seq_len {
                return bad(format!("sample {n} tokens + pads != sequence length"));
            }
            for &k in obs.iter().chain(masked) {
                if !observed[[n, k]] {
                    return bad(format!("sample {n} uses missing column {k}"));
                }
            }
            if obs.iter().any(|k| masked.contains(k)) {
                return bad(format!("sample {n} has overlapping sets"));
            }
        }
        Ok(())
    }
}

fn check_rows_nonempty(m: ArrayView2<'_, bool>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        if !row.iter().any(|&o| o) {
            return Err(Error::InvalidInput(format!("row {i} has no observed features")));
        }
    }
    Ok(())
}

fn check_ratio(name: &str, p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {p} out of range")))
    }
}

/// Naive copy masking over the whole split with a fresh row permutation.
pub fn naive_copy_mask(observed: &Mask, p_cm: f64, stream: &mut Stream) -> Result<Mask> {
    let mut perm: Vec<usize> = (0..observed.nrows()).collect();
    perm.shuffle(stream);
    naive_copy_mask_with_permutation(observed, &perm, p_cm, stream)
}

/// Naive copy masking where row `i` may adopt the mask of row `perm[i]`.
pub fn naive_copy_mask_with_permutation(
    observed: &Mask,
    perm: &[usize],
    p_cm: f64,
    stream: &mut Stream,
) -> Result<Mask> {
    // Closed range here; configurations keep p_cm below 1.
    if !(0.0..=1.0).contains(&p_cm) {
        return Err(Error::InvalidArgument(format!("p_cm = {p_cm} out of range")));
    }
    check_rows_nonempty(observed.view())?;
    let n = observed.nrows();
    if perm.len() != n {
        return Err(Error::Shape(format!("permutation of {} for {n} rows", perm.len())));
    }
    let mut copy = observed.clone();
    for i in 0..n {
        let u: f64 = stream.random();
        let candidate = observed.row(perm[i]);
        let left = copy
            .row(i)
            .iter()
            .zip(candidate.iter())
            .filter(|(&a, &b)| a && b)
            .count();
        if u < p_cm && left >= 1 {
            copy.row_mut(i).assign(&candidate);
        }
    }
    Ok(copy)
}

fn effective_counts(observed: ArrayView2<'_, bool>, copy: ArrayView2<'_, bool>) -> Vec<usize> {
    observed
        .rows()
        .into_iter()
        .zip(copy.rows())
        .map(|(m, c)| m.iter().zip(c.iter()).filter(|(&a, &b)| a && b).count())
        .collect()
}

/// Lower median: the ⌈B/2⌉-th order statistic.
pub fn lower_median(values: &[usize]) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    Some(sorted[sorted.len().div_ceil(2) - 1])
}

fn check_batch_shapes(
    sample_ids: &[usize],
    observed: ArrayView2<'_, bool>,
    copy: ArrayView2<'_, bool>,
) -> Result<()> {
    if sample_ids.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if observed.dim() != copy.dim() || observed.nrows() != sample_ids.len() {
        return Err(Error::Shape(format!(
            "batch of {} with masks {:?} and {:?}",
            sample_ids.len(),
            observed.dim(),
            copy.dim()
        )));
    }
    Ok(())
}

/// Median-truncated copy masking for one batch.
pub fn mtcm_build_batch(
    sample_ids: &[usize],
    observed: ArrayView2<'_, bool>,
    copy: ArrayView2<'_, bool>,
    stream: &mut Stream,
) -> Result<MaskedBatch> {
    check_batch_shapes(sample_ids, observed, copy)?;
    let counts = effective_counts(observed, copy);
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!(
            "sample {} keeps no observed feature after copy masking",
            sample_ids[i]
        )));
    }
    let median = lower_median(&counts).expect("non-empty batch");
    let k = observed.ncols();

    let mut batch = MaskedBatch {
        sample_ids: sample_ids.to_vec(),
        copy_mask: copy.to_owned(),
        observed_sets: Vec::with_capacity(counts.len()),
        masked_sets: Vec::with_capacity(counts.len()),
        o_trunc: Vec::with_capacity(counts.len()),
        seq_len: median,
        pad_counts: Vec::with_capacity(counts.len()),
    };
    let mut order: Vec<usize> = (0..k).collect();
    for (n, &count) in counts.iter().enumerate() {
        let trunc = count.min(median);
        order.shuffle(stream);
        let mut kept = Vec::with_capacity(trunc);
        let mut masked = Vec::new();
        for &col in &order {
            if observed[[n, col]] && copy[[n, col]] && kept.len() < trunc {
                kept.push(col);
            } else if observed[[n, col]] {
                masked.push(col);
            }
        }
        masked.sort_unstable();
        batch.observed_sets.push(kept);
        batch.masked_sets.push(masked);
        batch.o_trunc.push(trunc);
        batch.pad_counts.push(median - trunc);
    }
    debug_assert!(batch.validate(observed).is_ok());
    Ok(batch)
}

/// Copy masking without truncation: every effectively observed feature is an
/// encoder token and sequences are padded to the batch maximum.
pub fn copy_mask_batch(
    sample_ids: &[usize],
    observed: ArrayView2<'_, bool>,
    copy: ArrayView2<'_, bool>,
) -> Result<MaskedBatch> {
    check_batch_shapes(sample_ids, observed, copy)?;
    let k = observed.ncols();
    let mut observed_sets = Vec::with_capacity(sample_ids.len());
    let mut masked_sets = Vec::with_capacity(sample_ids.len());
    for n in 0..sample_ids.len() {
        let kept: Vec<usize> = (0..k).filter(|&c| observed[[n, c]] && copy[[n, c]]).collect();
        if kept.is_empty() {
            return Err(Error::InvalidInput(format!(
                "sample {} keeps no observed feature after copy masking",
                sample_ids[n]
            )));
        }
        masked_sets.push((0..k).filter(|&c| observed[[n, c]] && !copy[[n, c]]).collect());
        observed_sets.push(kept);
    }
    Ok(padded_batch(sample_ids, copy.to_owned(), observed_sets, masked_sets))
}

/// Uniform random masking: each observed cell is hidden with probability
/// `ratio`; a sample that would lose every cell keeps one at random.
pub fn random_mask(
    sample_ids: &[usize],
    observed: ArrayView2<'_, bool>,
    ratio: f64,
    stream: &mut Stream,
) -> Result<MaskedBatch> {
    check_ratio("ratio", ratio)?;
    check_batch_shapes(sample_ids, observed, observed)?;
    check_rows_nonempty(observed)?;
    let k = observed.ncols();
    let mut keep = Array2::from_elem(observed.dim(), false);
    let mut observed_sets = Vec::with_capacity(sample_ids.len());
    let mut masked_sets = Vec::with_capacity(sample_ids.len());
    for n in 0..sample_ids.len() {
        let cells: Vec<usize> = (0..k).filter(|&c| observed[[n, c]]).collect();
        let mut kept = Vec::new();
        let mut masked = Vec::new();
        for &c in &cells {
            if stream.random::<f64>() < ratio {
                masked.push(c);
            } else {
                kept.push(c);
            }
        }
        if kept.is_empty() {
            let forced = cells[stream.random_range(0..cells.len())];
            masked.retain(|&c| c != forced);
            kept.push(forced);
        }
        for &c in &kept {
            keep[[n, c]] = true;
        }
        observed_sets.push(kept);
        masked_sets.push(masked);
    }
    Ok(padded_batch(sample_ids, keep, observed_sets, masked_sets))
}

fn padded_batch(
    sample_ids: &[usize],
    copy_mask: Array2<bool>,
    observed_sets: Vec<Vec<usize>>,
    masked_sets: Vec<Vec<usize>>,
) -> MaskedBatch {
    let seq_len = observed_sets.iter().map(Vec::len).max().unwrap_or(0);
    MaskedBatch {
        sample_ids: sample_ids.to_vec(),
        copy_mask,
        o_trunc: observed_sets.iter().map(Vec::len).collect(),
        pad_counts: observed_sets.iter().map(|s| seq_len - s.len()).collect(),
        observed_sets,
        masked_sets,
        seq_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn hand_executed_copy_mask() {
        let m = array![[true, true], [true, false]];
        let out = naive_copy_mask_with_permutation(&m, &[1, 0], 1.0, &mut rng::stream(0))
            .unwrap();
        assert_eq!(out, array![[true, false], [true, true]]);
    }

    #[test]
    fn zero_rate_and_identity_permutation_keep_mask() {
        let m = array![[true, false, true], [false, true, true], [true, true, true]];
        let mut s = rng::stream(1);
        assert_eq!(naive_copy_mask(&m, 0.0, &mut s).unwrap(), m);
        assert_eq!(naive_copy_mask_with_permutation(&m, &[0, 1, 2], 0.99, &mut s).unwrap(), m);
    }

    #[test]
    fn copy_mask_guard_blocks_disjoint_rows() {
        // row 0 would keep nothing if it adopted row 1's mask
        let m = array![[true, false], [false, true]];
        let out = naive_copy_mask_with_permutation(&m, &[1, 0], 0.99, &mut rng::stream(3)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn copy_mask_rejects_empty_rows_and_bad_rate() {
        let m = array![[true, false], [false, false]];
        assert!(naive_copy_mask(&m, 0.5, &mut rng::stream(0)).is_err());
        let m = array![[true]];
        assert!(naive_copy_mask(&m, 1.5, &mut rng::stream(0)).is_err());
    }

    fn rows_with_counts(counts: &[usize], k: usize) -> Array2<bool> {
        Array2::from_shape_fn((counts.len(), k), |(n, c)| c < counts[n])
    }

    #[test]
    fn median_truncation_arithmetic() {
        let m = rows_with_counts(&[2, 5, 3], 6);
        let b = mtcm_build_batch(&[0, 1, 2], m.view(), m.view(), &mut rng::stream(2)).unwrap();
        assert_eq!(b.seq_len, 3);
        assert_eq!(b.o_trunc, vec![2, 3, 3]);
        assert_eq!(b.pad_counts, vec![1, 0, 0]);
        assert_eq!(b.masked_sets[1].len(), 2);
        b.validate(m.view()).unwrap();
    }

    #[test]
    fn even_batch_uses_lower_median() {
        let m = rows_with_counts(&[1, 1, 9, 9], 9);
        let b = mtcm_build_batch(&[0, 1, 2, 3], m.view(), m.view(), &mut rng::stream(2)).unwrap();
        assert_eq!(b.seq_len, 1);
        assert_eq!(b.o_trunc, vec![1, 1, 1, 1]);
        assert_eq!(b.pad_fraction(), 0.0);
    }

    #[test]
    fn fully_observed_rows_without_adoption() {
        let m = Array2::from_elem((5, 6), true);
        let b = mtcm_build_batch(&[0, 1, 2, 3, 4], m.view(), m.view(), &mut rng::stream(2)).unwrap();
        assert_eq!(b.seq_len, 6);
        assert!(b.masked_sets.iter().all(Vec::is_empty));
        assert!(b.pad_counts.iter().all(|&p| p == 0));
    }

    #[test]
    fn copy_mask_ones_on_missing_cells_are_ignored() {
        let m = array![[true, false, true]];
        let c = array![[true, true, false]];
        let b = mtcm_build_batch(&[7], m.view(), c.view(), &mut rng::stream(0)).unwrap();
        assert_eq!(b.observed_sets, vec![vec![0]]);
        assert_eq!(b.masked_sets, vec![vec![2]]);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = Array2::<bool>::from_elem((0, 3), true);
        assert!(mtcm_build_batch(&[], m.view(), m.view(), &mut rng::stream(0)).is_err());
    }

    #[test]
    fn naive_batch_pads_to_max() {
        let m = rows_with_counts(&[1, 4], 4);
        let b = copy_mask_batch(&[0, 1], m.view(), m.view()).unwrap();
        assert_eq!(b.seq_len, 4);
        assert_eq!(b.pad_counts, vec![3, 0]);
        b.validate(m.view()).unwrap();
    }

    #[test]
    fn random_mask_keeps_one_token() {
        let m = rows_with_counts(&[3, 1, 5], 5);
        for seed in 0..50 {
            let b = random_mask(&[0, 1, 2], m.view(), 0.99, &mut rng::stream(seed)).unwrap();
            b.validate(m.view()).unwrap();
        }
        assert!(random_mask(&[0], m.slice(ndarray::s![0..1, ..]), 0.0, &mut rng::stream(0)).is_err());
    }

    #[test]
    fn random_mask_tiny_ratio_hides_nothing() {
        let m = Array2::from_elem((4, 8), true);
        let b = random_mask(&[0, 1, 2, 3], m.view(), 1e-12, &mut rng::stream(5)).unwrap();
        assert!(b.masked_sets.iter().all(Vec::is_empty));
    }
}
