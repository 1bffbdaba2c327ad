//! Runs the four evaluations over grid samples, holdout and training data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EvalConfig, NnQuery, PipelineError};
use crate::dataset::{eval_bins, Cohort, CovariateGrid, EvalBin, Standardizer};
use crate::diffusion::cell_rng;
use crate::eval::calibration::{
    ace, coverage_delta, ks_uniform_distance, pit, pit_histogram, smooth_centile_curves, BinData, ACE_LEVELS,
    COVERAGE_LEVELS, PIT_BINS,
};
use crate::eval::dependence::{
    all_pairs, joint_histogram, mantel, pair_columns, pair_distances, product_of_marginals, ranked_pair_report,
    shape_matrix, subsample_rows, upgma_order, zscore_columns, MantelResult, PairDistanceRecord, RankedPairs,
    ShapeMatrix,
};
use crate::eval::distribution::{permutation_pvalue, rejection_fraction, KsResult};
use crate::eval::memorisation::{balance_by_strata, nn_ratio, ratio_histogram, Balanced, NnReport};
use crate::eval::{median, EvalError};
use crate::ndmath::Tensor;

pub const REPORT_SCHEMA: &str = "diffnorm-report/v1";

// Rng streams of the evaluation seed.
const STREAM_PROD: u64 = 1;
const STREAM_SUBSAMPLE: u64 = 2;
const STREAM_MANTEL: u64 = 3;
const STREAM_BALANCE: u64 = 4;
const STREAM_KS: u64 = 1 << 32;

pub struct EvalInputs<'a> {
    pub grid: &'a CovariateGrid,
    /// Standardised samples per grid cell.
    pub cell_samples: &'a [Tensor],
    /// Cohorts with standardised IDPs and native covariates.
    pub train: &'a Cohort,
    pub holdout: &'a Cohort,
    /// One standardised draw at each holdout subject's covariates.
    pub holdout_draws: Option<&'a Tensor>,
    pub standardizer: &'a Standardizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub age: f64,
    pub sex: Option<u8>,
    pub n_holdout: usize,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AceRecord {
    pub q: f64,
    pub idp: String,
    pub value: f64,
    pub per_bin: Vec<Option<f64>>,
    pub n_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub a: f64,
    pub idp: String,
    pub per_bin: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentileCurve {
    pub idp: String,
    pub q: f64,
    pub sex: Option<u8>,
    pub ages: Vec<f64>,
    /// Native units.
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinSummary>,
    pub ace: Vec<AceRecord>,
    /// `(q, mean ACE over IDPs)`.
    pub mean_ace: Vec<(f64, f64)>,
    pub coverage: Vec<CoverageRecord>,
    /// `(a, per-bin median over IDPs)`.
    pub median_coverage_curve: Vec<(f64, Vec<Option<f64>>)>,
    /// `(a, median over all eligible (bin, IDP) deltas)`.
    pub median_coverage_delta: Vec<(f64, f64)>,
    pub pit_hist: Vec<Vec<f64>>,
    pub pit_ks: Vec<f64>,
    pub centiles: Vec<CentileCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub results: Vec<KsResult>,
    pub alpha: f64,
    pub n_perm: usize,
    pub rejection_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub band: String,
    pub rank: usize,
    pub i: usize,
    pub j: usize,
    /// `real`, `gen`, `prod`, `gen_minus_real` or `gen_minus_prod`.
    pub kind: String,
    /// Row-major densities on the joint grid.
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependenceReport {
    pub min_age: Option<f64>,
    pub max_age: Option<f64>,
    pub n_real: usize,
    pub n_gen: usize,
    pub records: Vec<PairDistanceRecord>,
    pub median_e2_gen_vs_real: f64,
    pub median_e2_prod_vs_real: f64,
    pub shape_real: ShapeMatrix,
    pub shape_gen: ShapeMatrix,
    pub leaf_order: Vec<usize>,
    pub mantel: Option<MantelResult>,
    pub ranked: Option<RankedPairs>,
    pub panels: Vec<Panel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorisationReport {
    pub query: NnQuery,
    pub balanced: Balanced,
    pub nn: NnReport,
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub idp_names: Vec<String>,
    pub calibration: Option<CalibrationReport>,
    pub ks: Option<KsReport>,
    pub dependence: Option<DependenceReport>,
    pub memorisation: Option<MemorisationReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub schema: String,
    pub mean_ace: BTreeMap<String, f64>,
    pub mean_ace_overall: Option<f64>,
    pub median_coverage_delta: BTreeMap<String, f64>,
    pub pit_ks: Vec<f64>,
    pub ks_rejection_fraction: Option<f64>,
    pub median_e2_gen_vs_real: Option<f64>,
    pub median_e2_prod_vs_real: Option<f64>,
    pub mantel_r: Option<f64>,
    pub mantel_p: Option<f64>,
    pub prob_lt_1: Option<f64>,
}

impl EvalReport {
    pub fn headline(&self) -> Headline {
        let cal = self.calibration.as_ref();
        let dep = self.dependence.as_ref();
        let key = |x: f64| format!("{x}");
        Headline {
            schema: REPORT_SCHEMA.to_string(),
            mean_ace: cal.map(|c| c.mean_ace.iter().map(|&(q, v)| (key(q), v)).collect()).unwrap_or_default(),
            mean_ace_overall: cal.map(|c| c.mean_ace.iter().map(|x| x.1).sum::<f64>() / c.mean_ace.len() as f64),
            median_coverage_delta: cal
                .map(|c| c.median_coverage_delta.iter().map(|&(a, v)| (key(a), v)).collect())
                .unwrap_or_default(),
            pit_ks: cal.map(|c| c.pit_ks.clone()).unwrap_or_default(),
            ks_rejection_fraction: self.ks.as_ref().map(|k| k.rejection_fraction),
            median_e2_gen_vs_real: dep.map(|d| d.median_e2_gen_vs_real),
            median_e2_prod_vs_real: dep.map(|d| d.median_e2_prod_vs_real),
            mantel_r: dep.and_then(|d| d.mantel.map(|m| m.r)),
            mantel_p: dep.and_then(|d| d.mantel.map(|m| m.p)),
            prob_lt_1: self.memorisation.as_ref().map(|m| m.nn.prob_lt_1),
        }
    }
}

pub fn evaluate(inputs: &EvalInputs, cfg: &EvalConfig) -> Result<EvalReport, PipelineError> {
    let d = inputs.holdout.d();
    if inputs.cell_samples.len() != inputs.grid.cells.len() {
        return Err(PipelineError::Format(format!(
            "{} sample blocks for {} grid cells",
            inputs.cell_samples.len(),
            inputs.grid.cells.len()
        )));
    }
    if inputs.cell_samples.iter().any(|t| t.last_dim() != d || t.outer_len() == 0) || inputs.train.d() != d {
        return Err(PipelineError::Format("sample, train and holdout widths disagree".into()));
    }
    let mut report = EvalReport { idp_names: inputs.holdout.idp_names().to_vec(), ..EvalReport::default() };
    let needs_bins = cfg.calibration || cfg.ks;
    let bins = if needs_bins { eval_bins(inputs.holdout, inputs.grid, cfg.by_sex)? } else { Vec::new() };
    let bin_samples: Vec<Tensor> = bins.iter().map(|b| mixture_samples(b, inputs)).collect();
    if cfg.calibration {
        report.calibration = Some(calibration(inputs, cfg, &bins, &bin_samples)?);
    }
    if cfg.ks {
        report.ks = Some(ks_suite(inputs, cfg, &bins, &bin_samples)?);
    }
    if cfg.dependence {
        report.dependence = Some(dependence(inputs, cfg)?);
    }
    if cfg.memorisation {
        report.memorisation = Some(memorisation(inputs, cfg)?);
    }
    Ok(report)
}

/// Model samples for a bin, mixing its grid cells in the holdout's covariate proportions.
fn mixture_samples(bin: &EvalBin, inputs: &EvalInputs) -> Tensor {
    let mut counts = vec![0usize; bin.cells.len()];
    for &r in &bin.rows {
        let cell = inputs.grid.cell_index(inputs.holdout.age(r), inputs.holdout.sex(r));
        if let Some(k) = bin.cells.iter().position(|&c| Some(c) == cell) {
            counts[k] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let sizes: Vec<usize> = bin.cells.iter().map(|&c| inputs.cell_samples[c].outer_len()).collect();
    let take: Vec<usize> = if total == 0 || bin.cells.len() == 1 {
        sizes.clone()
    } else {
        // Largest total size whose split follows the holdout proportions.
        let scale = counts
            .iter()
            .zip(&sizes)
            .filter(|(&n, _)| n > 0)
            .map(|(&n, &m)| m as f64 * total as f64 / n as f64)
            .fold(f64::INFINITY, f64::min);
        counts.iter().zip(&sizes).map(|(&n, &m)| ((scale * n as f64 / total as f64).floor() as usize).min(m).max(usize::from(n > 0))).collect()
    };
    let d = inputs.holdout.d();
    let mut data = Vec::new();
    for (&c, &k) in bin.cells.iter().zip(&take) {
        data.extend_from_slice(&inputs.cell_samples[c].data()[..k * d]);
    }
    let rows = data.len() / d;
    Tensor::new(vec![rows, d], data).expect("whole rows")
}

fn calibration(inputs: &EvalInputs, cfg: &EvalConfig, bins: &[EvalBin], samples: &[Tensor]) -> Result<CalibrationReport, PipelineError> {
    let names = inputs.holdout.idp_names();
    let d = names.len();
    let idps = inputs.holdout.idps();
    let per_idp: Vec<Vec<BinData>> = (0..d)
        .map(|j| {
            bins.iter()
                .zip(samples)
                .map(|(b, s)| BinData::new(&s.column(j), &b.rows.iter().map(|&r| idps.row(r)[j]).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let min = cfg.min_bin_count;

    let mut ace_records = Vec::new();
    let mut mean_ace = Vec::new();
    for &q in &ACE_LEVELS {
        let mut total = 0.0;
        for (j, data) in per_idp.iter().enumerate() {
            let r = ace(data, q, min)?;
            total += r.value;
            ace_records.push(AceRecord { q, idp: names[j].clone(), value: r.value, per_bin: r.per_bin, n_excluded: r.excluded.len() });
        }
        mean_ace.push((q, total / d as f64));
    }

    let mut coverage = Vec::new();
    let mut median_curve = Vec::new();
    let mut median_delta = Vec::new();
    for &a in &COVERAGE_LEVELS {
        let per: Vec<Vec<Option<f64>>> = per_idp.iter().map(|data| coverage_delta(data, a, min)).collect::<Result<_, _>>()?;
        let curve: Vec<Option<f64>> = (0..bins.len())
            .map(|b| median(&per.iter().filter_map(|v| v[b]).collect::<Vec<_>>()))
            .collect();
        let all: Vec<f64> = per.iter().flatten().flatten().copied().collect();
        median_delta.push((a, median(&all).ok_or(EvalError::NoEligibleBins(min))?));
        median_curve.push((a, curve));
        for (j, v) in per.into_iter().enumerate() {
            coverage.push(CoverageRecord { a, idp: names[j].clone(), per_bin: v });
        }
    }

    let mut pit_hist = Vec::new();
    let mut pit_ks = Vec::new();
    for data in &per_idp {
        let u = pit(data, min);
        pit_ks.push(ks_uniform_distance(&u)?);
        pit_hist.push(pit_histogram(&u, PIT_BINS));
    }

    let st = inputs.standardizer;
    let mut centiles = Vec::new();
    let groups: Vec<Option<u8>> = if cfg.by_sex { vec![Some(0), Some(1)] } else { vec![None] };
    for (j, data) in per_idp.iter().enumerate() {
        for &q in &ACE_LEVELS {
            for &sex in &groups {
                let members: Vec<usize> = (0..bins.len()).filter(|&b| bins[b].sex == sex).collect();
                let raw: Vec<f64> = members
                    .iter()
                    .map(|&b| data[b].samples.centile(q).map(|v| v * st.sds[j] + st.means[j]))
                    .collect::<Result<_, _>>()?;
                centiles.push(CentileCurve {
                    idp: names[j].clone(),
                    q,
                    sex,
                    ages: members.iter().map(|&b| bins[b].age).collect(),
                    smoothed: smooth_centile_curves(&raw, cfg.smoothing_sigma)?,
                    raw,
                });
            }
        }
    }

    Ok(CalibrationReport {
        bins: bins
            .iter()
            .zip(samples)
            .map(|(b, s)| BinSummary { age: b.age, sex: b.sex, n_holdout: b.rows.len(), n_samples: s.outer_len() })
            .collect(),
        ace: ace_records,
        mean_ace,
        coverage,
        median_coverage_curve: median_curve,
        median_coverage_delta: median_delta,
        pit_hist,
        pit_ks,
        centiles,
    })
}

fn bin_label(b: &EvalBin) -> String {
    match b.sex {
        Some(s) => format!("age={},sex={s}", b.age),
        None => format!("age={}", b.age),
    }
}

fn ks_suite(inputs: &EvalInputs, cfg: &EvalConfig, bins: &[EvalBin], samples: &[Tensor]) -> Result<KsReport, PipelineError> {
    let names = inputs.holdout.idp_names();
    let idps = inputs.holdout.idps();
    let mut results = Vec::new();
    let mut test = 0u64;
    for (b, s) in bins.iter().zip(samples) {
        if b.rows.len() < cfg.min_bin_count.max(1) {
            continue;
        }
        let cap = (cfg.ks_gen_cap_factor * b.rows.len()).min(s.outer_len());
        for (j, name) in names.iter().enumerate() {
            let real: Vec<f64> = b.rows.iter().map(|&r| idps.row(r)[j]).collect();
            let gen: Vec<f64> = (0..cap).map(|i| s.row(i)[j]).collect();
            let mut rng = cell_rng(cfg.seed, STREAM_KS + test);
            test += 1;
            let (d, p) = permutation_pvalue(&real, &gen, cfg.ks_permutations, &mut rng)?;
            results.push(KsResult { bin: bin_label(b), idp: name.clone(), d, p, n_real: real.len(), n_gen: gen.len() });
        }
    }
    if results.is_empty() {
        return Err(EvalError::NoEligibleBins(cfg.min_bin_count).into());
    }
    let ps: Vec<f64> = results.iter().map(|r| r.p).collect();
    Ok(KsReport { rejection_fraction: rejection_fraction(&ps, cfg.alpha)?, alpha: cfg.alpha, n_perm: cfg.ks_permutations, results })
}

fn in_band(age: f64, cfg: &EvalConfig) -> bool {
    cfg.dependence_min_age.is_none_or(|lo| age >= lo) && cfg.dependence_max_age.is_none_or(|hi| age <= hi)
}

fn density(zx: &[f64], zy: &[f64]) -> Vec<f64> {
    let h = joint_histogram(zx, zy);
    let n = zx.len().max(1) as f64;
    h.counts.iter().map(|c| c / n).collect()
}

fn dependence(inputs: &EvalInputs, cfg: &EvalConfig) -> Result<DependenceReport, PipelineError> {
    let draws = inputs
        .holdout_draws
        .ok_or_else(|| PipelineError::Config("dependence evaluation needs draws at the holdout covariates".into()))?;
    let h = inputs.holdout;
    let rows: Vec<usize> = (0..h.n()).filter(|&i| in_band(h.age(i), cfg)).collect();
    if rows.len() < 2 {
        return Err(PipelineError::Eval(EvalError::Invalid(format!("only {} holdout rows in the dependence band", rows.len()))));
    }
    let real = h.idps().select_rows(&rows);
    let gen = draws.select_rows(&rows);
    let prod = product_of_marginals(&gen, &mut cell_rng(cfg.seed, STREAM_PROD))?;

    let mut sub_rng = cell_rng(cfg.seed, STREAM_SUBSAMPLE);
    let cap = |t: &Tensor, rng: &mut _| t.select_rows(&subsample_rows(t.outer_len(), cfg.distance_cap, rng));
    let (real_s, gen_s, prod_s) = (cap(&real, &mut sub_rng), cap(&gen, &mut sub_rng), cap(&prod, &mut sub_rng));

    let pairs = all_pairs(h.d());
    let records: Vec<PairDistanceRecord> = pairs
        .iter()
        .map(|&(i, j)| pair_distances(i, j, &pair_columns(&real_s, i, j), &pair_columns(&gen_s, i, j), &pair_columns(&prod_s, i, j)))
        .collect::<Result<_, _>>()?;
    let med = |f: fn(&PairDistanceRecord) -> f64| median(&records.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);

    let shape_real = shape_matrix(&real, &pairs)?;
    let shape_gen = shape_matrix(&gen, &pairs)?;
    let leaf_order = upgma_order(&shape_real)?;
    let p = pairs.len();
    let mantel = if p >= 3 {
        Some(mantel(&shape_real.matrix, &shape_gen.matrix, p, cfg.mantel_permutations, &mut cell_rng(cfg.seed, STREAM_MANTEL))?)
    } else {
        None
    };

    let k = cfg.ranked_k.min(p / 3);
    let ranked = if k > 0 { Some(ranked_pair_report(&records, k)?) } else { None };
    let mut panels = Vec::new();
    if let Some(r) = &ranked {
        let zr = zscore_columns(&real)?;
        // Generated and product sets share the real set's scaling so the maps subtract cleanly.
        let scale = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.last_dim())
                .map(|c| {
                    let col = real.column(c);
                    let n = col.len() as f64;
                    let m = col.iter().sum::<f64>() / n;
                    let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                    t.column(c).iter().map(|x| (x - m) / sd).collect()
                })
                .collect()
        };
        let (zg, zp) = (scale(&gen), scale(&prod));
        for (band, list) in [("top", &r.top), ("middle", &r.middle), ("bottom", &r.bottom)] {
            for (rank, rec) in list.iter().enumerate() {
                let (i, j) = (rec.i, rec.j);
                let dr = density(&zr[i], &zr[j]);
                let dg = density(&zg[i], &zg[j]);
                let dp = density(&zp[i], &zp[j]);
                let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
                let maps = [
                    ("real", dr.clone()),
                    ("gen", dg.clone()),
                    ("prod", dp.clone()),
                    ("gen_minus_real", diff(&dg, &dr)),
                    ("gen_minus_prod", diff(&dg, &dp)),
                ];
                for (kind, grid) in maps {
                    panels.push(Panel { band: band.to_string(), rank, i, j, kind: kind.to_string(), grid });
                }
            }
        }
    }

    Ok(DependenceReport {
        min_age: cfg.dependence_min_age,
        max_age: cfg.dependence_max_age,
        n_real: real.outer_len(),
        n_gen: gen.outer_len(),
        median_e2_gen_vs_real: med(|r| r.e2_gen_vs_real),
        median_e2_prod_vs_real: med(|r| r.e2_prod_vs_real),
        records,
        shape_real,
        shape_gen,
        leaf_order,
        mantel,
        ranked,
        panels,
    })
}

fn memorisation(inputs: &EvalInputs, cfg: &EvalConfig) -> Result<MemorisationReport, PipelineError> {
    let balanced = balance_by_strata(inputs.train, inputs.holdout, &mut cell_rng(cfg.seed, STREAM_BALANCE));
    if balanced.train.is_empty() {
        return Err(PipelineError::Eval(EvalError::Empty("balanced reference sets")));
    }
    let generated = match cfg.nn_query {
        NnQuery::Holdout => inputs
            .holdout_draws
            .ok_or_else(|| PipelineError::Config("holdout-covariate queries need draws at the holdout covariates".into()))?
            .select_rows(&balanced.holdout),
        NnQuery::Grid => {
            let d = inputs.holdout.d();
            let data: Vec<f64> = inputs.cell_samples.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(vec![data.len() / d, d], data).expect("whole rows")
        }
    };
    let nn = nn_ratio(
        &generated,
        &inputs.train.idps().select_rows(&balanced.train),
        &inputs.holdout.idps().select_rows(&balanced.holdout),
    )?;
    Ok(MemorisationReport { query: cfg.nn_query, histogram: ratio_histogram(&nn.ratios), balanced, nn })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(ages: &[f64], sexes: &[u8], d: usize, f: impl Fn(usize, usize) -> f64) -> Cohort {
        let n = ages.len();
        let cov = Tensor::new(vec![n, 2], (0..n).flat_map(|i| [ages[i], f64::from(sexes[i])]).collect()).unwrap();
        let idps = Tensor::new(vec![n, d], (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| f(i, j)).collect()).unwrap();
        Cohort::new(cov, idps, (0..d).map(|j| format!("v{j}")).collect()).unwrap()
    }

    #[test]
    fn mixture_follows_holdout_sex_ratio() {
        let grid = CovariateGrid::covering(50.0, 50.0);
        // Three holdout rows of sex 0, one of sex 1.
        let holdout = cohort(&[50.0, 50.0, 50.0, 50.0], &[0, 0, 0, 1], 1, |i, _| i as f64);
        let cells = vec![Tensor::filled(&[100, 1], 0.0), Tensor::filled(&[100, 1], 1.0)];
        let st = Standardizer { means: vec![0.0], sds: vec![1.0] };
        let inputs = EvalInputs { grid: &grid, cell_samples: &cells, train: &holdout, holdout: &holdout, holdout_draws: None, standardizer: &st };
        let bins = eval_bins(&holdout, &grid, false).unwrap();
        let s = mixture_samples(&bins[0], &inputs);
        let ones = s.column(0).iter().filter(|&&v| v == 1.0).count();
        assert_eq!((s.outer_len(), ones), (133, 33));
        let by_sex = eval_bins(&holdout, &grid, true).unwrap();
        assert_eq!(mixture_samples(&by_sex[1], &inputs).outer_len(), 100);
    }

    #[test]
    fn toggles_skip_reports() {
        let grid = CovariateGrid::covering(50.0, 51.0);
        let ages: Vec<f64> = (0..200).map(|i| 50.0 + (i % 2) as f64).collect();
        let sexes: Vec<u8> = (0..200).map(|i| (i / 2 % 2) as u8).collect();
        let h = cohort(&ages, &sexes, 3, |i, j| ((i * 7 + j * 13) % 17) as f64 / 17.0);
        let cells: Vec<Tensor> = (0..4).map(|c| Tensor::new(vec![50, 3], (0..150).map(|k| ((k * 5 + c) % 19) as f64 / 19.0).collect()).unwrap()).collect();
        let st = Standardizer { means: vec![0.0; 3], sds: vec![1.0; 3] };
        let draws = h.idps().clone();
        let inputs = EvalInputs { grid: &grid, cell_samples: &cells, train: &h, holdout: &h, holdout_draws: Some(&draws), standardizer: &st };
        let mut cfg = EvalConfig { ks_permutations: 20, mantel_permutations: 20, ..EvalConfig::default() };
        cfg.select("ks").unwrap();
        let r = evaluate(&inputs, &cfg).unwrap();
        assert!(r.ks.is_some() && r.calibration.is_none() && r.dependence.is_none() && r.memorisation.is_none());
        cfg.select("all").unwrap();
        let r = evaluate(&inputs, &cfg).unwrap();
        let hl = r.headline();
        assert_eq!(hl.mean_ace.len(), 5);
        assert!(hl.mantel_r.is_some());
        // Draws identical to the holdout: every generated point sits on a holdout point.
        assert_eq!(r.memorisation.unwrap().nn.prob_lt_1, 0.0);
        assert_eq!(r.dependence.as_ref().unwrap().panels.len(), 15);
        assert_eq!(evaluate(&inputs, &cfg).unwrap().headline(), hl);
    }
}
