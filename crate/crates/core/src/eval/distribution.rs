//! Two-sample Kolmogorov–Smirnov statistic with label-permutation p-values.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sorted, EvalError};

pub const DEFAULT_PERMUTATIONS: usize = 500;
/// Generated rows per bin are capped at this multiple of the real count.
pub const GEN_CAP_FACTOR: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub bin: String,
    pub idp: String,
    pub d: f64,
    pub p: f64,
    pub n_real: usize,
    pub n_gen: usize,
}

/// `sup_t |F_a(t) − F_b(t)|` evaluated exactly over the pooled support.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("KS sample"));
    }
    let (sa, sb) = (sorted(a), sorted(b));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < sa.len() && j < sb.len() {
        let t = sa[i].min(sb[j]);
        while i < sa.len() && sa[i] <= t {
            i += 1;
        }
        while j < sb.len() && sb[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Pooled sample sorted once; permutations then cost O(n) each.
struct Pooled {
    /// End (exclusive) of each run of tied values in sorted order.
    group_ends: Vec<usize>,
    /// Original position of each sorted element.
    order: Vec<usize>,
}

impl Pooled {
    fn new(values: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&x, &y| values[x].total_cmp(&values[y]));
        let mut group_ends = Vec::new();
        for k in 1..=order.len() {
            if k == order.len() || values[order[k]] != values[order[k - 1]] {
                group_ends.push(k);
            }
        }
        Self { group_ends, order }
    }

    /// KS distance when `is_a[original index]` marks group membership.
    fn statistic(&self, is_a: &[bool], na: usize, nb: usize) -> f64 {
        let (mut ca, mut start, mut d) = (0usize, 0usize, 0.0f64);
        for &end in &self.group_ends {
            ca += self.order[start..end].iter().filter(|&&o| is_a[o]).count();
            let cb = end - ca;
            d = d.max((ca as f64 / na as f64 - cb as f64 / nb as f64).abs());
            start = end;
        }
        d
    }
}

/// Add-one permutation p-value for the KS statistic with group sizes preserved.
pub fn permutation_pvalue<R: Rng + ?Sized>(a: &[f64], b: &[f64], n_perm: usize, rng: &mut R) -> Result<(f64, f64), EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::Empty("KS sample"));
    }
    if n_perm == 0 {
        return Err(EvalError::Invalid("need at least one permutation".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let pool = Pooled::new(&pooled);
    let (na, nb) = (a.len(), b.len());
    let mut labels: Vec<bool> = (0..na + nb).map(|i| i < na).collect();
    let observed = pool.statistic(&labels, na, nb);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        labels.shuffle(rng);
        if pool.statistic(&labels, na, nb) >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((observed, (1 + hits) as f64 / (n_perm + 1) as f64))
}

/// Share of tests with `p < alpha`.
pub fn rejection_fraction(p_values: &[f64], alpha: f64) -> Result<f64, EvalError> {
    if p_values.is_empty() {
        return Err(EvalError::Empty("KS results"));
    }
    Ok(p_values.iter().filter(|&&p| p < alpha).count() as f64 / p_values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn ks_examples() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(ks_statistic(&[], &[1.0]).is_err());
    }

    #[test]
    fn permutation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = [1.0, 2.0, 3.0];
        let (d, p) = permutation_pvalue(&a, &a, 500, &mut rng).unwrap();
        assert_eq!((d, p), (0.0, 1.0));
        let x: Vec<f64> = (0..100).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..100).map(|_| 5.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let (_, p) = permutation_pvalue(&x, &y, 500, &mut rng).unwrap();
        assert!(p <= 1.0 / 501.0 + 1e-15);
        assert_eq!(rejection_fraction(&[1.0, 1.0], 0.05).unwrap(), 0.0);
        assert_eq!(rejection_fraction(&[0.01, 0.5], 0.05).unwrap(), 0.5);
    }

    proptest! {
        #[test]
        fn pooled_statistic_matches_direct(a in proptest::collection::vec(-5i32..5, 1..20), b in proptest::collection::vec(-5i32..5, 1..20)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = ks_statistic(&a, &b).unwrap();
            prop_assert!((ks_statistic(&b, &a).unwrap() - d).abs() < 1e-15);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (obs, p) = permutation_pvalue(&a, &b, 20, &mut rng).unwrap();
            prop_assert!((obs - d).abs() < 1e-12);
            prop_assert!(p >= 1.0 / 21.0 && p <= 1.0);
            // Strictly increasing transform leaves D unchanged.
            let ea: Vec<f64> = a.iter().map(|x| x.exp()).collect();
            let eb: Vec<f64> = b.iter().map(|x| x.exp()).collect();
            prop_assert!((ks_statistic(&ea, &eb).unwrap() - d).abs() < 1e-15);
        }
    }
}
