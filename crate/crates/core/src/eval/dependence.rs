//! Pairwise dependence diagnostics: energy distance, MMD, joint-histogram
//! shape matrices with UPGMA ordering, and the Mantel test.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{pearson, EvalError};
use crate::ndmath::Tensor;

/// Per-axis histogram bins for joint densities.
pub const SHAPE_BINS: usize = 15;
pub const SHAPE_RANGE: f64 = 3.0;
/// Rows per set for the quadratic-cost distances.
pub const DISTANCE_CAP: usize = 2000;
pub const MANTEL_PERMUTATIONS: usize = 999;

/// Shuffles every column independently: marginals kept exactly, dependence removed.
pub fn product_of_marginals<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor, EvalError> {
    let (m, d) = (x.outer_len(), x.last_dim());
    if m < 2 {
        return Err(EvalError::Invalid(format!("need at least 2 rows, got {m}")));
    }
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mut col = x.column(j);
        col.shuffle(rng);
        for (i, v) in col.into_iter().enumerate() {
            out[i * d + j] = v;
        }
    }
    Ok(Tensor::new(vec![m, d], out).expect("same shape"))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sets(x: &Tensor, y: &Tensor, min: usize) -> Result<(), EvalError> {
    if x.outer_len() < min || y.outer_len() < min {
        return Err(EvalError::Invalid(format!("need at least {min} rows per set")));
    }
    if x.last_dim() != y.last_dim() {
        return Err(EvalError::Invalid("point dimensions differ".into()));
    }
    Ok(())
}

/// Mean of `f` over ordered pairs `i != i'` within one set (0 for a single row).
fn within_mean(x: &Tensor, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let n = x.outer_len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for k in i + 1..n {
            s += f(x.row(i), x.row(k));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

fn cross_mean(x: &Tensor, y: &Tensor, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut s = 0.0;
    for i in 0..x.outer_len() {
        for j in 0..y.outer_len() {
            s += f(x.row(i), y.row(j));
        }
    }
    s / (x.outer_len() * y.outer_len()) as f64
}

/// `2 E‖x−y‖ − E‖x−x'‖ − E‖y−y'‖` with all three means over the full `n²`,
/// `nm` and `m²` pair grids, so identical sets give exactly 0 and the value is never negative.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64, EvalError> {
    check_sets(x, y, 1)?;
    let full = |t: &Tensor| {
        let n = t.outer_len() as f64;
        within_mean(t, dist) * (n - 1.0) / n
    };
    Ok(2.0 * cross_mean(x, y, dist) - full(x) - full(y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    MedianHeuristic,
    Fixed(f64),
}

/// Median of the non-zero pairwise distances of the pooled set.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64, EvalError> {
    let rows: Vec<&[f64]> = (0..x.outer_len()).map(|i| x.row(i)).chain((0..y.outer_len()).map(|j| y.row(j))).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for k in i + 1..rows.len() {
            let v = dist(rows[i], rows[k]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return Err(EvalError::Invalid("all pooled points identical; median bandwidth is 0".into()));
    }
    Ok(super::median(&d).expect("non-empty"))
}

/// Unbiased MMD² with kernel `exp(−‖u−v‖² / (2h²))`.
pub fn mmd2_rbf(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<f64, EvalError> {
    check_sets(x, y, 2)?;
    let h = match bandwidth {
        Bandwidth::MedianHeuristic => median_heuristic(x, y)?,
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(EvalError::Invalid(format!("bandwidth {h} must be positive"))),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    Ok(within_mean(x, k) + within_mean(y, k) - 2.0 * cross_mean(x, y, k))
}

/// Uniform row subsample without replacement when `n > cap`; sorted indices.
pub fn subsample_rows<R: Rng + ?Sized>(n: usize, cap: usize, rng: &mut R) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut idx = index::sample(rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

/// Two columns of a tensor as an `[N, 2]` tensor.
pub fn pair_columns(x: &Tensor, i: usize, j: usize) -> Tensor {
    let n = x.outer_len();
    let data = (0..n).flat_map(|r| [x.row(r)[i], x.row(r)[j]]).collect();
    Tensor::new(vec![n, 2], data).expect("two columns")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointHistogram {
    /// Row-major `bins x bins` counts; first axis is variable `i`.
    pub counts: Vec<f64>,
    pub bins: usize,
    pub dropped: usize,
}

/// Per-variable mean and sample sd (denominator `N−1`).
fn moments(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

fn bin_of(z: f64) -> Option<usize> {
    if !(-SHAPE_RANGE..=SHAPE_RANGE).contains(&z) {
        return None;
    }
    let b = ((z + SHAPE_RANGE) / (2.0 * SHAPE_RANGE) * SHAPE_BINS as f64) as usize;
    Some(b.min(SHAPE_BINS - 1))
}

/// 15x15 histogram of already z-scored values on `[−3, 3]²`; outside mass is dropped.
pub fn joint_histogram(zx: &[f64], zy: &[f64]) -> JointHistogram {
    let mut counts = vec![0.0; SHAPE_BINS * SHAPE_BINS];
    let mut dropped = 0;
    for (&a, &b) in zx.iter().zip(zy) {
        match (bin_of(a), bin_of(b)) {
            (Some(i), Some(j)) => counts[i * SHAPE_BINS + j] += 1.0,
            _ => dropped += 1,
        }
    }
    JointHistogram { counts, bins: SHAPE_BINS, dropped }
}

/// Z-scores every column of `data` with its own mean and sd.
pub fn zscore_columns(data: &Tensor) -> Result<Vec<Vec<f64>>, EvalError> {
    if data.outer_len() < 2 {
        return Err(EvalError::Invalid("need at least 2 rows".into()));
    }
    (0..data.last_dim())
        .map(|j| {
            let col = data.column(j);
            let (m, sd) = moments(&col);
            if !(sd > 0.0) {
                return Err(EvalError::Invalid(format!("variable {j} has zero variance")));
            }
            Ok(col.iter().map(|x| (x - m) / sd).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMatrix {
    pub pairs: Vec<(usize, usize)>,
    /// Row-major `P x P` Pearson correlations between vectorised joint histograms.
    pub matrix: Vec<f64>,
    pub histograms: Vec<JointHistogram>,
    /// Fraction of points outside the grid, per pair.
    pub dropped_fraction: Vec<f64>,
}

impl ShapeMatrix {
    pub fn size(&self) -> usize {
        self.pairs.len()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.matrix[a * self.pairs.len() + b]
    }

    /// Correlation distance `1 − ρ`.
    pub fn distances(&self) -> Vec<f64> {
        self.matrix.iter().map(|r| 1.0 - r).collect()
    }
}

/// All pairs `(i, j)` with `i < j < d`.
pub fn all_pairs(d: usize) -> Vec<(usize, usize)> {
    (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect()
}

pub fn shape_matrix(data: &Tensor, pairs: &[(usize, usize)]) -> Result<ShapeMatrix, EvalError> {
    let z = zscore_columns(data)?;
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= z.len() || j >= z.len()) {
        return Err(EvalError::Invalid(format!("pair ({i}, {j}) out of range")));
    }
    let histograms: Vec<JointHistogram> = pairs.iter().map(|&(i, j)| joint_histogram(&z[i], &z[j])).collect();
    let p = pairs.len();
    let mut matrix = vec![0.0; p * p];
    for a in 0..p {
        matrix[a * p + a] = 1.0;
        for b in a + 1..p {
            let r = pearson(&histograms[a].counts, &histograms[b].counts);
            matrix[a * p + b] = r;
            matrix[b * p + a] = r;
        }
    }
    let n = data.outer_len() as f64;
    let dropped_fraction = histograms.iter().map(|h| h.dropped as f64 / n).collect();
    Ok(ShapeMatrix { pairs: pairs.to_vec(), matrix, histograms, dropped_fraction })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Leaves of the left and right child clusters.
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub merges: Vec<Merge>,
    pub leaf_order: Vec<usize>,
}

/// Average-linkage agglomerative clustering on a `P x P` distance matrix.
///
/// Ties go to the pair whose clusters have the lowest minimum leaf indices;
/// the child with the lower minimum index is placed on the left.
pub fn upgma(dist: &[f64], p: usize) -> Result<Dendrogram, EvalError> {
    if dist.len() != p * p {
        return Err(EvalError::Invalid(format!("distance matrix has {} entries, expected {}", dist.len(), p * p)));
    }
    if p == 0 {
        return Ok(Dendrogram { merges: Vec::new(), leaf_order: Vec::new() });
    }
    // Active clusters as (leaf order, min leaf); distances between slots.
    let mut clusters: Vec<Option<(Vec<usize>, usize)>> = (0..p).map(|i| Some((vec![i], i))).collect();
    let mut d: Vec<f64> = dist.to_vec();
    let mut merges = Vec::with_capacity(p.saturating_sub(1));
    for _ in 1..p {
        let mut best: Option<(f64, usize, usize, (usize, usize))> = None;
        for a in 0..p {
            let Some((_, ma)) = &clusters[a] else { continue };
            for b in a + 1..p {
                let Some((_, mb)) = &clusters[b] else { continue };
                let key = ((*ma).min(*mb), (*ma).max(*mb));
                let v = d[a * p + b];
                let better = match best {
                    None => true,
                    Some((bv, _, _, bk)) => v < bv || (v == bv && key < bk),
                };
                if better {
                    best = Some((v, a, b, key));
                }
            }
        }
        let (h, a, b, _) = best.expect("at least two active clusters");
        let (la, ma) = clusters[a].take().expect("active");
        let (lb, mb) = clusters[b].take().expect("active");
        let (na, nb) = (la.len() as f64, lb.len() as f64);
        for k in 0..p {
            if clusters[k].is_some() {
                let v = (na * d[a * p + k] + nb * d[b * p + k]) / (na + nb);
                d[a * p + k] = v;
                d[k * p + a] = v;
            }
        }
        let (left, right) = if ma < mb { (la, lb) } else { (lb, la) };
        let leaves: Vec<usize> = left.iter().chain(&right).copied().collect();
        merges.push(Merge { left, right, height: h });
        clusters[a] = Some((leaves, ma.min(mb)));
    }
    let leaf_order = clusters.into_iter().flatten().next().expect("one cluster left").0;
    Ok(Dendrogram { merges, leaf_order })
}

/// Leaf order of the average-linkage tree on `1 − ρ`.
pub fn upgma_order(shape: &ShapeMatrix) -> Result<Vec<usize>, EvalError> {
    Ok(upgma(&shape.distances(), shape.size())?.leaf_order)
}

/// Reorders rows and columns of a `P x P` matrix.
pub fn permute_matrix(m: &[f64], p: usize, order: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; p * p];
    for (a, &oa) in order.iter().enumerate() {
        for (b, &ob) in order.iter().enumerate() {
            out[a * p + b] = m[oa * p + ob];
        }
    }
    out
}

fn upper(m: &[f64], p: usize, perm: Option<&[usize]>) -> Vec<f64> {
    let mut v = Vec::with_capacity(p * p.saturating_sub(1) / 2);
    for a in 0..p {
        for b in a + 1..p {
            v.push(match perm {
                Some(pi) => m[pi[a] * p + pi[b]],
                None => m[a * p + b],
            });
        }
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MantelResult {
    pub r: f64,
    pub p: f64,
    pub n_perm: usize,
}

/// Pearson `r` of the strict upper triangles and an add-one permutation p-value
/// from simultaneous row/column permutations of `b`.
pub fn mantel<R: Rng + ?Sized>(a: &[f64], b: &[f64], p: usize, n_perm: usize, rng: &mut R) -> Result<MantelResult, EvalError> {
    if a.len() != p * p || b.len() != p * p {
        return Err(EvalError::Invalid("matrix sizes differ".into()));
    }
    if p < 3 {
        return Err(EvalError::Invalid(format!("need at least 3 items, got {p}")));
    }
    let ua = upper(a, p, None);
    let r = pearson(&ua, &upper(b, p, None));
    let mut perm: Vec<usize> = (0..p).collect();
    let mut hits = 0;
    for _ in 0..n_perm {
        perm.shuffle(rng);
        if pearson(&ua, &upper(b, p, Some(&perm))) >= r - 1e-12 {
            hits += 1;
        }
    }
    Ok(MantelResult { r, p: (1 + hits) as f64 / (n_perm + 1) as f64, n_perm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistanceRecord {
    pub i: usize,
    pub j: usize,
    pub e2_prod_vs_gen: f64,
    pub e2_gen_vs_real: f64,
    pub e2_prod_vs_real: f64,
    pub mmd2_prod_vs_gen: f64,
    pub mmd2_gen_vs_real: f64,
    pub mmd2_prod_vs_real: f64,
}

/// Distances for one variable pair between real, generated and product-of-marginals sets.
pub fn pair_distances(i: usize, j: usize, real: &Tensor, gen: &Tensor, prod: &Tensor) -> Result<PairDistanceRecord, EvalError> {
    let bw = Bandwidth::MedianHeuristic;
    Ok(PairDistanceRecord {
        i,
        j,
        e2_prod_vs_gen: energy_distance(prod, gen)?,
        e2_gen_vs_real: energy_distance(gen, real)?,
        e2_prod_vs_real: energy_distance(prod, real)?,
        mmd2_prod_vs_gen: mmd2_rbf(prod, gen, bw)?,
        mmd2_gen_vs_real: mmd2_rbf(gen, real, bw)?,
        mmd2_prod_vs_real: mmd2_rbf(prod, real, bw)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPairs {
    pub top: Vec<PairDistanceRecord>,
    pub middle: Vec<PairDistanceRecord>,
    pub bottom: Vec<PairDistanceRecord>,
}

/// Pairs ranked by `mmd2_prod_vs_gen` (largest first): top, middle and bottom `k`.
pub fn ranked_pair_report(records: &[PairDistanceRecord], k: usize) -> Result<RankedPairs, EvalError> {
    if k == 0 || records.len() < 3 * k {
        return Err(EvalError::Invalid(format!("need at least {} pairs for k = {k}, got {}", 3 * k, records.len())));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.mmd2_prod_vs_gen.total_cmp(&a.mmd2_prod_vs_gen));
    let mid = (sorted.len() - k) / 2;
    Ok(RankedPairs {
        top: sorted[..k].to_vec(),
        middle: sorted[mid..mid + k].to_vec(),
        bottom: sorted[sorted.len() - k..].to_vec(),
    })
}
