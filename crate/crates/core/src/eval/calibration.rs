//! Empirical CDFs, sample centiles, ACE, coverage, PIT and centile smoothing.

use super::{sorted, EvalError};

/// Centile levels reported for ACE.
pub const ACE_LEVELS: [f64; 5] = [0.02, 0.25, 0.5, 0.75, 0.98];
/// Nominal central-interval coverages.
pub const COVERAGE_LEVELS: [f64; 3] = [0.5, 0.8, 0.9];
/// Minimum holdout rows for a bin to enter any calibration summary.
pub const MIN_BIN_COUNT: usize = 20;
pub const PIT_BINS: usize = 20;

/// Fraction of samples `<= t`.
pub fn ecdf(samples: &[f64], t: f64) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty("ecdf samples"));
    }
    Ok(samples.iter().filter(|&&y| y <= t).count() as f64 / samples.len() as f64)
}

/// Sorted sample set with O(log M) eCDF and O(1) centiles.
#[derive(Clone, Debug, PartialEq)]
pub struct SortedSamples(Vec<f64>);

impl SortedSamples {
    pub fn new(samples: &[f64]) -> Result<Self, EvalError> {
        if samples.is_empty() {
            return Err(EvalError::Empty("sample set"));
        }
        Ok(Self(sorted(samples)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn ecdf(&self, t: f64) -> f64 {
        self.0.partition_point(|&y| y <= t) as f64 / self.0.len() as f64
    }

    /// The `⌈qM⌉`-th order statistic.
    pub fn centile(&self, q: f64) -> Result<f64, EvalError> {
        Ok(self.0[order_index(q, self.0.len())?])
    }
}

/// Zero-based index of the `⌈qM⌉`-th order statistic, i.e. the smallest
/// `k` with `k / M >= q`, evaluated in the same arithmetic as the eCDF.
fn order_index(q: f64, m: usize) -> Result<usize, EvalError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(EvalError::Invalid(format!("centile level {q} outside (0, 1)")));
    }
    let mf = m as f64;
    let mut k = ((q * mf).ceil() as usize).clamp(1, m);
    while k > 1 && (k - 1) as f64 / mf >= q {
        k -= 1;
    }
    while k < m && (k as f64) / mf < q {
        k += 1;
    }
    Ok(k - 1)
}

pub fn centile(samples: &[f64], q: f64) -> Result<f64, EvalError> {
    SortedSamples::new(samples)?.centile(q)
}

/// Model samples and holdout values of one IDP in one covariate bin.
#[derive(Clone, Debug)]
pub struct BinData {
    pub samples: SortedSamples,
    pub holdout: Vec<f64>,
}

impl BinData {
    pub fn new(samples: &[f64], holdout: &[f64]) -> Result<Self, EvalError> {
        Ok(Self { samples: SortedSamples::new(samples)?, holdout: holdout.to_vec() })
    }

    pub fn eligible(&self, min_count: usize) -> bool {
        self.holdout.len() >= min_count.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AceResult {
    pub value: f64,
    /// `|ζ̂ − ζ_emp|` per bin; `None` for excluded bins.
    pub per_bin: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Mean absolute difference between model and holdout centiles across eligible bins.
pub fn ace(bins: &[BinData], q: f64, min_count: usize) -> Result<AceResult, EvalError> {
    let mut per_bin = Vec::with_capacity(bins.len());
    let mut excluded = Vec::new();
    let (mut total, mut n) = (0.0, 0usize);
    for (i, b) in bins.iter().enumerate() {
        if !b.eligible(min_count) {
            excluded.push(i);
            per_bin.push(None);
            continue;
        }
        let err = (b.samples.centile(q)? - centile(&b.holdout, q)?).abs();
        total += err;
        n += 1;
        per_bin.push(Some(err));
    }
    if n == 0 {
        return Err(EvalError::NoEligibleBins(min_count));
    }
    Ok(AceResult { value: total / n as f64, per_bin, excluded })
}

/// Central interval `(ζ̂((1−a)/2), ζ̂((1+a)/2))`.
pub fn central_interval(samples: &SortedSamples, a: f64) -> Result<(f64, f64), EvalError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(EvalError::Invalid(format!("coverage level {a} outside (0, 1)")));
    }
    Ok((samples.centile((1.0 - a) / 2.0)?, samples.centile((1.0 + a) / 2.0)?))
}

/// Per-bin empirical coverage of the open central interval minus `a`.
pub fn coverage_delta(bins: &[BinData], a: f64, min_count: usize) -> Result<Vec<Option<f64>>, EvalError> {
    bins.iter()
        .map(|b| {
            if !b.eligible(min_count) {
                return Ok(None);
            }
            let (lo, hi) = central_interval(&b.samples, a)?;
            let inside = b.holdout.iter().filter(|&&y| y > lo && y < hi).count();
            Ok(Some(inside as f64 / b.holdout.len() as f64 - a))
        })
        .collect()
}

/// PIT values `u = eCDF_bin(y)` of every holdout row in eligible bins, pooled.
pub fn pit(bins: &[BinData], min_count: usize) -> Vec<f64> {
    bins.iter()
        .filter(|b| b.eligible(min_count))
        .flat_map(|b| b.holdout.iter().map(|&y| b.samples.ecdf(y)))
        .collect()
}

/// Equal-width histogram of values in `[0, 1]`, as masses summing to 1.
pub fn pit_histogram(u: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if u.is_empty() {
        return h;
    }
    for &x in u {
        let i = ((x * bins as f64) as usize).min(bins - 1);
        h[i] += 1.0;
    }
    h.iter_mut().for_each(|c| *c /= u.len() as f64);
    h
}

/// Exact one-sample KS distance between the empirical law of `u` and Uniform(0, 1).
pub fn ks_uniform_distance(u: &[f64]) -> Result<f64, EvalError> {
    if u.is_empty() {
        return Err(EvalError::Empty("PIT values"));
    }
    let s = sorted(u);
    let n = s.len() as f64;
    Ok(s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max))
}

/// Mirror an out-of-range index back into `0..n` (edge sample repeated).
fn reflect(j: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = j.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

/// Gaussian smoothing along age, truncated at 4σ, with reflection at both ends.
pub fn smooth_centile_curves(curve: &[f64], sigma_bins: f64) -> Result<Vec<f64>, EvalError> {
    if !(sigma_bins >= 0.0) {
        return Err(EvalError::Invalid(format!("sigma {sigma_bins} must be >= 0")));
    }
    if sigma_bins == 0.0 || curve.is_empty() {
        return Ok(curve.to_vec());
    }
    let radius = (4.0 * sigma_bins).ceil() as isize;
    let mut w: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma_bins * sigma_bins)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let n = curve.len();
    Ok((0..n)
        .map(|i| {
            w.iter()
                .enumerate()
                .map(|(k, wk)| wk * curve[reflect(i as isize + k as isize - radius, n)])
                .sum()
        })
        .collect())
}
