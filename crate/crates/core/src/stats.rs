//! Order-independent summary statistics and binomial intervals.
//!
//! Aggregates keep count, sum and sum of squares in f64 so partial results
//! merge associatively. Callers that need byte-identical output fold the
//! values in a fixed order.

use serde::{Deserialize, Serialize};

/// Streaming mean/variance accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    sum: f64,
    sumsq: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        self.sum += x;
        self.sumsq += x * x;
    }

    pub fn merge(&mut self, other: &RunningStats) {
        self.count += other.count;
        self.sum += other.sum;
        self.sumsq += other.sumsq;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean, or 0 for an empty accumulator.
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    /// Population variance, clamped at zero.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let m = self.mean();
        (self.sumsq / self.count as f64 - m * m).max(0.0)
    }

    pub fn summary(&self) -> Summary {
        let variance = self.variance();
        Summary { count: self.count, mean: self.mean(), variance, std: variance.sqrt() }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub mean: f64,
    pub variance: f64,
    pub std: f64,
}

/// Median of `values` (mean of the two middle elements for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// A success proportion with its raw counts and 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub successes: u64,
    pub trials: u64,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Rate {
    pub fn new(successes: u64, trials: u64) -> Self {
        let rate = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        let (ci_low, ci_high) = wilson_interval(successes, trials);
        Self { successes, trials, rate, ci_low, ci_high }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_value_has_zero_variance() {
        let s: RunningStats = [0.731_f64].into_iter().collect();
        assert_eq!(s.variance(), 0.0);
        assert_eq!(s.mean(), 0.731);
    }

    #[test]
    fn known_moments() {
        let s: RunningStats = [1.0, 2.0, 3.0, 4.0].into_iter().collect();
        assert_eq!(s.mean(), 2.5);
        assert!((s.variance() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn wilson_reference_values() {
        // 96 of 100: standard tables give (0.9016, 0.9843).
        let (lo, hi) = wilson_interval(96, 100);
        assert!((lo - 0.9016).abs() < 5e-4 && (hi - 0.9843).abs() < 5e-4, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.2775).abs() < 5e-4);
    }

    proptest! {
        #[test]
        fn merge_matches_sequential(xs in proptest::collection::vec(-1e3f64..1e3, 0..50), split in 0usize..50) {
            let split = split.min(xs.len());
            let whole: RunningStats = xs.iter().copied().collect();
            let mut a: RunningStats = xs[..split].iter().copied().collect();
            let b: RunningStats = xs[split..].iter().copied().collect();
            a.merge(&b);
            prop_assert_eq!(a.count(), whole.count());
            prop_assert!((a.mean() - whole.mean()).abs() < 1e-9);
            prop_assert!((a.variance() - whole.variance()).abs() < 1e-6);
        }

        #[test]
        fn wilson_contains_point_estimate(k in 0u64..200, extra in 0u64..200) {
            let n = k + extra;
            prop_assume!(n > 0);
            let r = Rate::new(k, n);
            prop_assert!(r.ci_low <= r.rate + 1e-12 && r.rate <= r.ci_high + 1e-12);
            prop_assert!(r.ci_low >= 0.0 && r.ci_high <= 1.0);
        }
    }
}
