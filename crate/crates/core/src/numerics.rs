//! Deterministic numeric primitives shared by every other module.
//!
//! All arithmetic is `f64`. Randomness comes from [`Rng`], a thin wrapper over
//! ChaCha8 (a counter-based stream cipher generator) so that a `(seed, stream)`
//! pair yields the same draw sequence on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seeded random stream.
///
/// The generator is ChaCha8 keyed by `seed` (expanded with the PCG32-based
/// `seed_from_u64` routine of `rand_core`) with the 64-bit ChaCha stream
/// selector set to `stream`. Independent purposes inside one run (large-batch
/// sampling, tie breaking, holdout sampling, initialization) use distinct
/// streams of the same seed so that one consumer never perturbs another.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below called with n = 0");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Per-candidate selection scores; always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "score {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Numerically stable log-softmax (max-subtraction, then log-sum-exp).
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("log_softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("log_softmax input is not finite"));
    }
    let mut out = vec![0.0; logits.len()];
    log_softmax_into(logits, &mut out);
    Ok(out)
}

/// Unchecked core of [`log_softmax`]; `logits` must be finite and non-empty.
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Log of `sum(exp(values))`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn cross_entropy(log_probs: &[f64], label: usize) -> Result<f64> {
    match log_probs.get(label) {
        // -0.0 for a perfect prediction is normalised to 0.0
        Some(&lp) => Ok(0.0 - lp),
        None => Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            log_probs.len()
        ))),
    }
}

/// Indices of the `k` largest scores, returned in ascending index order.
///
/// Exact ties (bitwise float equality) at the selection boundary are broken
/// uniformly at random: candidates are shuffled with `rng` before a stable
/// descending sort, so every tied subset is equally likely. The generator is
/// advanced by the same amount regardless of whether ties exist.
pub fn top_k_indices(scores: &ScoreVector, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {n}, got k = {k}"
        )));
    }
    let values = scores.values();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Arithmetic mean and sample (n - 1) standard deviation. A single value has
/// standard deviation 0.
pub fn mean_and_sample_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((mean, (ss / (n - 1.0)).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_best_sum(values: &[f64], k: usize) -> f64 {
        let n = values.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let s: f64 = (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| values[i])
                .sum();
            best = best.max(s);
        }
        best
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let out = log_softmax(&[0.0, 0.0]).unwrap();
        for v in out {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&[3.5; 7]).unwrap();
        for v in out {
            assert!((v + (7f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn log_softmax_large_logits() {
        // exact: [-ln(1 + e^-1000), -1000 - ln(1 + e^-1000)] and e^-1000 underflows
        let out = log_softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], -1000.0);
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        assert!(log_softmax(&[0.0, f64::NAN]).is_err());
        assert!(log_softmax(&[f64::INFINITY]).is_err());
        assert!(log_softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = vec![-(10f64).ln(); 10];
        assert!((cross_entropy(&uniform, 3).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        assert_eq!(cross_entropy(&[0.0, f64::NEG_INFINITY], 0).unwrap(), 0.0);
        let lp = [0.7f64.ln(), 0.3f64.ln()];
        assert!((cross_entropy(&lp, 1).unwrap() - 1.2039728043259361).abs() < 1e-12);
        assert!(cross_entropy(&lp, 2).is_err());
    }

    #[test]
    fn top_k_strict_order() {
        let s = ScoreVector::new(vec![0.1, 0.9, 0.5]).unwrap();
        let mut rng = Rng::new(0);
        assert_eq!(top_k_indices(&s, 2, &mut rng).unwrap(), vec![1, 2]);
    }

    #[test]
    fn top_k_rejects_bad_k() {
        let s = ScoreVector::new(vec![0.1, 0.9]).unwrap();
        let mut rng = Rng::new(0);
        assert!(top_k_indices(&s, 3, &mut rng).is_err());
        assert!(top_k_indices(&s, 0, &mut rng).is_err());
    }

    #[test]
    fn top_k_uniform_among_ties() {
        let s = ScoreVector::new(vec![1.0; 5]).unwrap();
        let mut rng = Rng::new(11);
        let draws = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            counts[top_k_indices(&s, 1, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.2).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn top_k_matches_subset_oracle_for_eight() {
        let mut rng = Rng::new(5);
        let values: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let s = ScoreVector::new(values.clone()).unwrap();
        let chosen = top_k_indices(&s, 3, &mut rng).unwrap();
        let got: f64 = chosen.iter().map(|&i| values[i]).sum();
        assert_eq!(got, brute_force_best_sum(&values, 3));
    }

    #[test]
    fn scores_must_be_finite() {
        assert!(ScoreVector::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = Rng::with_stream(3, 1);
        let mut b = Rng::with_stream(3, 1);
        let mut c = Rng::with_stream(3, 2);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn sample_std_convention() {
        let (m, s) = mean_and_sample_std(&[0.8, 0.9]).unwrap();
        assert!((m - 0.85).abs() < 1e-12);
        assert!((s - 0.0707106781186548).abs() < 1e-12);
        assert_eq!(mean_and_sample_std(&[0.4]).unwrap(), (0.4, 0.0));
    }

    mod props {
        use super::super::Rng;
        use super::super::*;
        use super::brute_force_best_sum;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn top_k_is_optimal_subset(
                values in prop::collection::vec(-5.0f64..5.0, 1..=10),
                k_raw in 1usize..=4,
                seed in any::<u64>(),
            ) {
                let k = k_raw.min(values.len());
                let s = ScoreVector::new(values.clone()).unwrap();
                let chosen = top_k_indices(&s, k, &mut Rng::new(seed)).unwrap();
                prop_assert_eq!(chosen.len(), k);
                let got: f64 = chosen.iter().map(|&i| values[i]).sum();
                let best = brute_force_best_sum(&values, k);
                prop_assert!((got - best).abs() <= 1e-12 * (1.0 + best.abs()));
            }

            #[test]
            fn top_k_shift_invariant(
                values in prop::collection::hash_set(-1000i32..1000, 2..=10),
                shift in -50.0f64..50.0,
                seed in any::<u64>(),
            ) {
                // distinct integer-valued scores: no ties before or after the shift
                let values: Vec<f64> = values.into_iter().map(f64::from).collect();
                let k = values.len() / 2;
                let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
                let a = top_k_indices(&ScoreVector::new(values).unwrap(), k.max(1), &mut Rng::new(seed)).unwrap();
                let b = top_k_indices(&ScoreVector::new(shifted).unwrap(), k.max(1), &mut Rng::new(seed ^ 1)).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn log_softmax_normalises(logits in prop::collection::vec(-1000.0f64..1000.0, 1..20)) {
                let lp = log_softmax(&logits).unwrap();
                let total: f64 = lp.iter().map(|v| v.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
