//! Inter-share interval distributions and the session cutoff derived from a
//! Gaussian fit on the log10 scale.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::event_store::Posting;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSample {
    pub values: Vec<f64>,
    pub scale: Scale,
}

impl IntervalSample {
    pub fn linear(values: Vec<f64>) -> Self {
        Self {
            values,
            scale: Scale::Linear,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// log10 of each interval, zero gaps clamped to one second.
    pub fn to_log10(&self) -> IntervalSample {
        match self.scale {
            Scale::Log10 => self.clone(),
            Scale::Linear => IntervalSample {
                values: self.values.iter().map(|&v| v.max(1.0).log10()).collect(),
                scale: Scale::Log10,
            },
        }
    }

    pub fn extend(&mut self, other: &IntervalSample) {
        assert_eq!(self.scale, other.scale, "cannot pool samples on different scales");
        self.values.extend_from_slice(&other.values);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    /// Mean of log10 seconds.
    pub mu: f64,
    /// Population standard deviation of log10 seconds.
    pub sigma: f64,
    pub n: usize,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IntervalError {
    #[error("need at least 2 interval samples to fit, got {0}")]
    TooFewSamples(usize),
    #[error("confidence multiplier must be non-negative, got {0}")]
    NegativeMultiplier(f64),
}

/// Gaps between consecutive shares of the video by the same user, pooled over
/// users.
pub fn same_user_intervals(seq: &[Posting]) -> IntervalSample {
    let mut last: HashMap<usize, i64> = HashMap::new();
    let mut values = Vec::new();
    for p in seq {
        if let Some(prev) = last.insert(p.user, p.timestamp) {
            values.push((p.timestamp - prev) as f64);
        }
    }
    IntervalSample::linear(values)
}

/// Gaps between consecutive users' first shares of the video.
pub fn diff_user_intervals(seq: &[Posting]) -> IntervalSample {
    let mut first: HashMap<usize, i64> = HashMap::new();
    for p in seq {
        first
            .entry(p.user)
            .and_modify(|t| *t = (*t).min(p.timestamp))
            .or_insert(p.timestamp);
    }
    let mut times: Vec<i64> = first.into_values().collect();
    times.sort_unstable();
    IntervalSample::linear(times.windows(2).map(|w| (w[1] - w[0]) as f64).collect())
}

/// Moments of log10 intervals.
pub fn fit_log_gaussian(samples: &IntervalSample) -> Result<GaussianFit, IntervalError> {
    let logs = samples.to_log10().values;
    let n = logs.len();
    if n < 2 {
        return Err(IntervalError::TooFewSamples(n));
    }
    let mu = logs.iter().sum::<f64>() / n as f64;
    let var = logs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n as f64;
    Ok(GaussianFit {
        mu,
        sigma: var.sqrt(),
        n,
    })
}

/// `μ − cσ` on the log10 axis.
pub fn threshold_log10(fit: &GaussianFit, c: f64) -> Result<f64, IntervalError> {
    if c < 0.0 {
        return Err(IntervalError::NegativeMultiplier(c));
    }
    Ok(fit.mu - c * fit.sigma)
}

/// Session cutoff in seconds, `10^(μ − cσ)`.
pub fn threshold_seconds(fit: &GaussianFit, c: f64) -> Result<f64, IntervalError> {
    threshold_log10(fit, c).map(|x| 10f64.powf(x))
}

/// One bin of a log10-interval histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Fixed-width histogram of log10 intervals, aligned to multiples of `width`.
pub fn log10_histogram(samples: &IntervalSample, width: f64) -> Vec<HistogramBin> {
    assert!(width > 0.0, "bin width must be positive");
    let logs = samples.to_log10().values;
    if logs.is_empty() {
        return Vec::new();
    }
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / width).floor() as i64;
    let last = (hi / width).floor() as i64;
    let mut counts = vec![0usize; (last - first + 1) as usize];
    for x in &logs {
        counts[((x / width).floor() as i64 - first) as usize] += 1;
    }
    let total = logs.len() as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| {
            let k = first + i as i64;
            HistogramBin {
                lo: k as f64 * width,
                hi: (k + 1) as f64 * width,
                count,
                fraction: count as f64 / total,
            }
        })
        .collect()
}

/// Same-user and different-user intervals pooled across many sequences.
pub fn pooled_intervals<'a, I>(sequences: I) -> (IntervalSample, IntervalSample)
where
    I: IntoIterator<Item = &'a [Posting]>,
{
    let mut same = IntervalSample::linear(Vec::new());
    let mut diff = IntervalSample::linear(Vec::new());
    for seq in sequences {
        same.extend(&same_user_intervals(seq));
        diff.extend(&diff_user_intervals(seq));
    }
    (same, diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(rows: &[(usize, usize, i64)]) -> Vec<Posting> {
        rows.iter()
            .enumerate()
            .map(|(i, &(user, community, timestamp))| Posting {
                event: i,
                video: 0,
                community,
                user,
                timestamp,
            })
            .collect()
    }

    #[test]
    fn same_user_trace() {
        let s = seq(&[(1, 0, 0), (2, 0, 100), (1, 0, 150), (3, 0, 400)]);
        assert_eq!(same_user_intervals(&s).values, vec![150.0]);
        assert!(same_user_intervals(&seq(&[(1, 0, 0), (2, 0, 5)])).is_empty());
    }

    #[test]
    fn same_user_zero_gap_clamps_on_log() {
        let s = same_user_intervals(&seq(&[(1, 0, 0), (1, 1, 0)]));
        assert_eq!(s.values, vec![0.0]);
        assert_eq!(s.to_log10().values, vec![0.0]);
    }

    #[test]
    fn diff_user_trace() {
        let s = seq(&[(1, 0, 0), (2, 0, 100), (1, 0, 150), (3, 0, 400)]);
        assert_eq!(diff_user_intervals(&s).values, vec![100.0, 300.0]);
        assert!(diff_user_intervals(&seq(&[(1, 0, 0), (1, 1, 9)])).is_empty());
        let tie = diff_user_intervals(&seq(&[(1, 0, 7), (2, 1, 7)]));
        assert_eq!(tie.values, vec![0.0]);
        assert_eq!(tie.to_log10().values, vec![0.0]);
    }

    #[test]
    fn fit_arithmetic() {
        let s = IntervalSample::linear(vec![100.0, 10_000.0, 1_000_000.0]);
        let f = fit_log_gaussian(&s).unwrap();
        assert!((f.mu - 4.0).abs() < 1e-12);
        assert!((f.sigma - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((f.sigma - 1.632993).abs() < 1e-6);
        let flat = fit_log_gaussian(&IntervalSample::linear(vec![50.0; 4])).unwrap();
        assert_eq!(flat.sigma, 0.0);
        assert_eq!(
            fit_log_gaussian(&IntervalSample::linear(vec![3.0])),
            Err(IntervalError::TooFewSamples(1))
        );
    }

    #[test]
    fn threshold_values() {
        let fit = |mu, sigma| GaussianFit { mu, sigma, n: 2 };
        assert!((threshold_seconds(&fit(4.0, 1.0), 0.0).unwrap() - 10_000.0).abs() < 1e-9);
        let t = threshold_seconds(&fit(6.844, 0.823), 3.0).unwrap();
        assert!((t - 10f64.powf(4.375)).abs() < 1e-6);
        assert!((t - 23713.7).abs() / 23713.7 < 0.01);
        assert!((threshold_seconds(&fit(1.0, 1.0), 3.0).unwrap() - 0.01).abs() < 1e-15);
        assert!(threshold_seconds(&fit(1.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let s = IntervalSample::linear(vec![1.0, 10.0, 12.0, 1000.0]);
        let h = log10_histogram(&s, 0.5);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(h.first().unwrap().lo, 0.0);
        assert_eq!(h.last().unwrap().lo, 3.0);
    }

    proptest! {
        #[test]
        fn threshold_decreases_in_c(mu in -2.0..9.0f64, sigma in 0.001..3.0f64, c in 0.0..5.0f64, dc in 0.001..2.0f64) {
            let f = GaussianFit { mu, sigma, n: 10 };
            prop_assert!(threshold_seconds(&f, c + dc).unwrap() < threshold_seconds(&f, c).unwrap());
        }

        #[test]
        fn fit_is_permutation_invariant(mut v in proptest::collection::vec(0.0..1e7f64, 2..50), seed in any::<u64>()) {
            let a = fit_log_gaussian(&IntervalSample::linear(v.clone())).unwrap();
            // Deterministic shuffle.
            let n = v.len();
            let mut state = seed | 1;
            for i in (1..n).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                v.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let b = fit_log_gaussian(&IntervalSample::linear(v)).unwrap();
            prop_assert!((a.mu - b.mu).abs() < 1e-12);
            prop_assert!((a.sigma - b.sigma).abs() < 1e-12);
        }

        #[test]
        fn interval_counts(rows in proptest::collection::vec((0..5usize, 0..4usize, 0..1000i64), 1..40)) {
            let mut rows = rows;
            rows.sort_by_key(|r| r.2);
            let s = seq(&rows);
            let users: std::collections::HashSet<usize> = rows.iter().map(|r| r.0).collect();
            prop_assert_eq!(same_user_intervals(&s).len() + users.len(), rows.len());
            prop_assert_eq!(diff_user_intervals(&s).len(), users.len() - 1);
        }
    }
}
