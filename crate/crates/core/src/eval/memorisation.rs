//! Nearest-neighbour memorisation check: exact k-d tree 1-NN and
//! covariate-stratified balancing of training and holdout reference sets.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::dataset::{strata, Cohort};
use crate::ndmath::Tensor;

const LEAF_SIZE: usize = 8;
pub const RATIO_BINS: usize = 40;
/// Upper edge of the ratio histogram; larger ratios (and +inf) fall in the last bin.
pub const RATIO_MAX: f64 = 4.0;

enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Exact Euclidean 1-NN index over the rows of a matrix.
pub struct KdTree {
    data: Vec<f64>,
    d: usize,
    /// Point ids in leaf order.
    ids: Vec<usize>,
    root: Node,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    pub fn build(points: &Tensor) -> Result<Self, EvalError> {
        let n = points.outer_len();
        if n == 0 {
            return Err(EvalError::Empty("k-d tree points"));
        }
        let d = points.last_dim();
        let mut ids: Vec<usize> = (0..n).collect();
        let data = points.data().to_vec();
        let root = Self::split(&data, d, &mut ids, 0);
        Ok(Self { data, d, ids, root })
    }

    fn split(data: &[f64], d: usize, ids: &mut [usize], offset: usize) -> Node {
        let n = ids.len();
        if n <= LEAF_SIZE {
            return Node::Leaf { start: offset, end: offset + n };
        }
        // Widest coordinate spread.
        let (mut dim, mut spread) = (0, -1.0);
        for k in 0..d {
            let (lo, hi) = ids.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = data[i * d + k];
                (lo.min(v), hi.max(v))
            });
            if hi - lo > spread {
                spread = hi - lo;
                dim = k;
            }
        }
        if spread <= 0.0 {
            return Node::Leaf { start: offset, end: offset + n };
        }
        let mid = n / 2;
        ids.select_nth_unstable_by(mid, |&a, &b| data[a * d + dim].total_cmp(&data[b * d + dim]));
        let value = data[ids[mid] * d + dim];
        let (l, r) = ids.split_at_mut(mid);
        Node::Split {
            dim,
            value,
            left: Box::new(Self::split(data, d, l, offset)),
            right: Box::new(Self::split(data, d, r, offset + mid)),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Nearest point `(index, distance)`; equal distances resolve to the lowest index.
    pub fn nearest(&self, q: &[f64]) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(&self.root, q, &mut best);
        (best.0, best.1.sqrt())
    }

    fn search(&self, node: &Node, q: &[f64], best: &mut (usize, f64)) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.ids[*start..*end] {
                    let d2 = sq_dist(q, &self.data[i * self.d..(i + 1) * self.d]);
                    if d2 < best.1 || (d2 == best.1 && i < best.0) {
                        *best = (i, d2);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equal-distance candidates reachable for the index tie-break.
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Linear-scan 1-NN with the same tie rule as [`KdTree::nearest`].
pub fn brute_nearest(points: &Tensor, q: &[f64]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..points.outer_len() {
        let d2 = sq_dist(q, points.row(i));
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumSize {
    pub age_bin: i64,
    pub sex: u8,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Balanced {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    pub strata: Vec<StratumSize>,
    /// Strata present in only one of the two sets.
    pub dropped: Vec<(i64, u8)>,
}

/// Per (age bin x sex) stratum, draws `min(n_train, n_holdout)` rows from each set without replacement.
pub fn balance_by_strata<R: Rng + ?Sized>(train: &Cohort, holdout: &Cohort, rng: &mut R) -> Balanced {
    let st = strata(train);
    let sh = strata(holdout);
    let keys: BTreeMap<(i64, u8), ()> = st.keys().chain(sh.keys()).map(|k| (*k, ())).collect();
    let mut out = Balanced { train: Vec::new(), holdout: Vec::new(), strata: Vec::new(), dropped: Vec::new() };
    for key in keys.into_keys() {
        let (a, b) = (st.get(&key), sh.get(&key));
        let (Some(a), Some(b)) = (a, b) else {
            out.dropped.push(key);
            continue;
        };
        let k = a.len().min(b.len());
        for (src, dst) in [(a, &mut out.train), (b, &mut out.holdout)] {
            let mut pick: Vec<usize> = index::sample(rng, src.len(), k).into_iter().map(|i| src[i]).collect();
            pick.sort_unstable();
            dst.extend(pick);
        }
        out.strata.push(StratumSize { age_bin: key.0, sex: key.1, n: k });
    }
    out.train.sort_unstable();
    out.holdout.sort_unstable();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnReport {
    pub d_train: Vec<f64>,
    pub d_hold: Vec<f64>,
    pub ratios: Vec<f64>,
    pub prob_lt_1: f64,
}

/// `r = d_train / d_hold` per generated row (`+inf` when only `d_hold` is 0, 1 when both are).
pub fn nn_ratio(generated: &Tensor, train: &Tensor, holdout: &Tensor) -> Result<NnReport, EvalError> {
    if generated.outer_len() == 0 {
        return Err(EvalError::Empty("generated samples"));
    }
    let (tt, th) = (KdTree::build(train)?, KdTree::build(holdout)?);
    let mut rep = NnReport { d_train: Vec::new(), d_hold: Vec::new(), ratios: Vec::new(), prob_lt_1: 0.0 };
    for i in 0..generated.outer_len() {
        let q = generated.row(i);
        let (dt, dh) = (tt.nearest(q).1, th.nearest(q).1);
        let r = match (dt == 0.0, dh == 0.0) {
            (true, true) => 1.0,
            (_, true) => f64::INFINITY,
            _ => dt / dh,
        };
        rep.d_train.push(dt);
        rep.d_hold.push(dh);
        rep.ratios.push(r);
    }
    rep.prob_lt_1 = prob_lt_1(&rep.ratios);
    Ok(rep)
}

pub fn prob_lt_1(ratios: &[f64]) -> f64 {
    ratios.iter().filter(|&&r| r < 1.0).count() as f64 / ratios.len().max(1) as f64
}

/// Counts over `RATIO_BINS` equal bins on `[0, RATIO_MAX]`; the last bin also takes larger values.
pub fn ratio_histogram(ratios: &[f64]) -> Vec<usize> {
    let mut h = vec![0; RATIO_BINS];
    for &r in ratios {
        let i = ((r / RATIO_MAX * RATIO_BINS as f64) as usize).min(RATIO_BINS - 1);
        h[i] += 1;
    }
    h
}
