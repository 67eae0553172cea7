//! Round-trip latency statistic and small order statistics.
//!
//! Latency is half the median round trip after discarding samples below the
//! 1st and above the 99th percentile. Percentiles interpolate linearly
//! between closest ranks: `rank = q (n - 1)`.

use alloc::vec::Vec;

/// Fewest timed passes accepted by [`latency_statistic`].
pub const MIN_PASSES: usize = 100;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("need at least {min} passes, got {got}")]
    TooFewPasses { min: usize, got: usize },
    #[error("round-trip samples must be finite and non-negative")]
    InvalidSample,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatencySummary {
    pub passes: usize,
    /// Samples left after trimming.
    pub kept: usize,
    /// Half of the trimmed median RTT.
    pub latency_ms: f64,
    /// Population standard deviation of the trimmed half-RTTs.
    pub stddev_ms: f64,
    pub rtt_p50_ms: f64,
    pub rtt_p90_ms: f64,
    pub rtt_p99_ms: f64,
}

/// Percentile `q` in [0, 1] of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let rank = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = libm::ceil(rank) as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median_sorted(sorted: &[f64]) -> f64 {
    percentile_sorted(sorted, 0.5)
}

/// Median of an unsorted slice. Returns NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

pub fn latency_statistic(rtts_ms: &[f64]) -> Result<LatencySummary, StatsError> {
    if rtts_ms.len() < MIN_PASSES {
        return Err(StatsError::TooFewPasses { min: MIN_PASSES, got: rtts_ms.len() });
    }
    if rtts_ms.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(StatsError::InvalidSample);
    }
    let mut sorted = rtts_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p1 = percentile_sorted(&sorted, 0.01);
    let p99 = percentile_sorted(&sorted, 0.99);
    let kept: Vec<f64> = sorted.iter().copied().filter(|x| *x >= p1 && *x <= p99).collect();
    let latency_ms = median_sorted(&kept) / 2.0;
    let n = kept.len() as f64;
    let mean = kept.iter().map(|x| x / 2.0).sum::<f64>() / n;
    let var = kept.iter().map(|x| (x / 2.0 - mean) * (x / 2.0 - mean)).sum::<f64>() / n;
    Ok(LatencySummary {
        passes: rtts_ms.len(),
        kept: kept.len(),
        latency_ms,
        stddev_ms: libm::sqrt(var),
        rtt_p50_ms: percentile_sorted(&sorted, 0.5),
        rtt_p90_ms: percentile_sorted(&sorted, 0.9),
        rtt_p99_ms: p99,
    })
}
