//! CSV and JSON emission for an [`EvalReport`].

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::evaluate::{CalibrationReport, DependenceReport, EvalReport, KsReport, MemorisationReport};
use super::{io_err, write_json, PipelineError};
use crate::eval::dependence::{permute_matrix, ShapeMatrix, SHAPE_BINS, SHAPE_RANGE};
use crate::eval::memorisation::{RATIO_BINS, RATIO_MAX};

struct Csv {
    w: csv::Writer<fs::File>,
    path: std::path::PathBuf,
}

impl Csv {
    fn create(path: &Path, header: &[&str]) -> Result<Self, PipelineError> {
        let w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut c = Self { w, path: path.to_path_buf() };
        c.row(header.iter().map(|s| s.to_string()))?;
        Ok(c)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<(), PipelineError> {
        let path = self.path.clone();
        self.w.write_record(fields.into_iter().collect::<Vec<_>>()).map_err(|e| csv_err(&path, e))
    }

    fn finish(mut self) -> Result<(), PipelineError> {
        self.w.flush().map_err(io_err(&self.path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    PipelineError::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sex(s: Option<u8>) -> String {
    s.map(|x| x.to_string()).unwrap_or_else(|| "all".into())
}

/// Writes every per-module report present in `report`, plus `report.json`.
pub fn write_reports(dir: &Path, report: &EvalReport) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if let Some(c) = &report.calibration {
        calibration(dir, c, &report.idp_names)?;
    }
    if let Some(k) = &report.ks {
        ks(dir, k)?;
    }
    if let Some(d) = &report.dependence {
        dependence(dir, d, &report.idp_names)?;
    }
    if let Some(m) = &report.memorisation {
        memorisation(dir, m)?;
    }
    #[derive(Serialize)]
    struct Full<'a> {
        #[serde(flatten)]
        headline: super::Headline,
        idp_names: &'a [String],
        evaluations: [(&'static str, bool); 4],
    }
    write_json(
        &dir.join("report.json"),
        &Full {
            headline: report.headline(),
            idp_names: &report.idp_names,
            evaluations: [
                ("calibration", report.calibration.is_some()),
                ("ks", report.ks.is_some()),
                ("dependence", report.dependence.is_some()),
                ("memorisation", report.memorisation.is_some()),
            ],
        },
    )
}

fn calibration(dir: &Path, c: &CalibrationReport, names: &[String]) -> Result<(), PipelineError> {
    let mut w = Csv::create(&dir.join("ace.csv"), &["q", "idp", "ace", "n_bins", "n_excluded"])?;
    for r in &c.ace {
        w.row([r.q.to_string(), r.idp.clone(), r.value.to_string(), (r.per_bin.len() - r.n_excluded).to_string(), r.n_excluded.to_string()])?;
    }
    w.finish()?;

    let mut w = Csv::create(&dir.join("coverage_delta.csv"), &["a", "age", "sex", "idp", "n_holdout", "delta"])?;
    for r in &c.coverage {
        for (b, v) in c.bins.iter().zip(&r.per_bin) {
            w.row([r.a.to_string(), b.age.to_string(), sex(b.sex), r.idp.clone(), b.n_holdout.to_string(), opt(*v)])?;
        }
    }
    for (a, curve) in &c.median_coverage_curve {
        for (b, v) in c.bins.iter().zip(curve) {
            w.row([a.to_string(), b.age.to_string(), sex(b.sex), "median".into(), b.n_holdout.to_string(), opt(*v)])?;
        }
    }
    w.finish()?;

    let mut w = Csv::create(&dir.join("pit_hist.csv"), &["idp", "lo", "hi", "mass"])?;
    for (name, hist) in names.iter().zip(&c.pit_hist) {
        let k = hist.len() as f64;
        for (i, m) in hist.iter().enumerate() {
            w.row([name.to_string(), (i as f64 / k).to_string(), ((i + 1) as f64 / k).to_string(), m.to_string()])?;
        }
    }
    w.finish()?;

    let mut w = Csv::create(&dir.join("centiles.csv"), &["idp", "sex", "age", "q", "centile", "smoothed"])?;
    for cc in &c.centiles {
        for ((age, raw), sm) in cc.ages.iter().zip(&cc.raw).zip(&cc.smoothed) {
            w.row([cc.idp.clone(), sex(cc.sex), age.to_string(), cc.q.to_string(), raw.to_string(), sm.to_string()])?;
        }
    }
    w.finish()
}

fn ks(dir: &Path, k: &KsReport) -> Result<(), PipelineError> {
    let mut w = Csv::create(&dir.join("ks_results.csv"), &["bin", "idp", "d", "p", "n_real", "n_gen"])?;
    for r in &k.results {
        w.row([r.bin.clone(), r.idp.clone(), r.d.to_string(), r.p.to_string(), r.n_real.to_string(), r.n_gen.to_string()])?;
    }
    w.finish()
}

fn pair_label(names: &[String], (i, j): (usize, usize)) -> String {
    format!("{}~{}", names[i], names[j])
}

fn matrix_csv(path: &Path, m: &[f64], s: &ShapeMatrix, order: &[usize], names: &[String]) -> Result<(), PipelineError> {
    let p = s.size();
    let labels: Vec<String> = order.iter().map(|&k| pair_label(names, s.pairs[k])).collect();
    let mut header = vec!["pair".to_string()];
    header.extend(labels.iter().cloned());
    let mut w = Csv::create(path, &header.iter().map(String::as_str).collect::<Vec<_>>())?;
    let ordered = permute_matrix(m, p, order);
    for (a, label) in labels.iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(ordered[a * p..(a + 1) * p].iter().map(|v| v.to_string()));
        w.row(row)?;
    }
    w.finish()
}

fn dependence(dir: &Path, d: &DependenceReport, names: &[String]) -> Result<(), PipelineError> {
    let mut w = Csv::create(
        &dir.join("pair_distances.csv"),
        &["i", "j", "pair", "e2_prod_vs_gen", "e2_gen_vs_real", "e2_prod_vs_real", "mmd2_prod_vs_gen", "mmd2_gen_vs_real", "mmd2_prod_vs_real"],
    )?;
    for r in &d.records {
        w.row([
            r.i.to_string(),
            r.j.to_string(),
            pair_label(names, (r.i, r.j)),
            r.e2_prod_vs_gen.to_string(),
            r.e2_gen_vs_real.to_string(),
            r.e2_prod_vs_real.to_string(),
            r.mmd2_prod_vs_gen.to_string(),
            r.mmd2_gen_vs_real.to_string(),
            r.mmd2_prod_vs_real.to_string(),
        ])?;
    }
    w.finish()?;

    let absdiff: Vec<f64> = d.shape_real.matrix.iter().zip(&d.shape_gen.matrix).map(|(a, b)| (a - b).abs()).collect();
    matrix_csv(&dir.join("cshape_real.csv"), &d.shape_real.matrix, &d.shape_real, &d.leaf_order, names)?;
    matrix_csv(&dir.join("cshape_gen.csv"), &d.shape_gen.matrix, &d.shape_real, &d.leaf_order, names)?;
    matrix_csv(&dir.join("cshape_absdiff.csv"), &absdiff, &d.shape_real, &d.leaf_order, names)?;

    #[derive(Serialize)]
    struct MantelFile<'a> {
        r: Option<f64>,
        p: Option<f64>,
        n_perm: Option<usize>,
        leaf_order: Vec<String>,
        min_age: Option<f64>,
        max_age: Option<f64>,
        n_real: usize,
        n_gen: usize,
        dropped_fraction_real: &'a [f64],
        dropped_fraction_gen: &'a [f64],
    }
    write_json(
        &dir.join("mantel.json"),
        &MantelFile {
            r: d.mantel.map(|m| m.r),
            p: d.mantel.map(|m| m.p),
            n_perm: d.mantel.map(|m| m.n_perm),
            leaf_order: d.leaf_order.iter().map(|&k| pair_label(names, d.shape_real.pairs[k])).collect(),
            min_age: d.min_age,
            max_age: d.max_age,
            n_real: d.n_real,
            n_gen: d.n_gen,
            dropped_fraction_real: &d.shape_real.dropped_fraction,
            dropped_fraction_gen: &d.shape_gen.dropped_fraction,
        },
    )?;

    let pairs_dir = dir.join("pairs");
    if !d.panels.is_empty() {
        fs::create_dir_all(&pairs_dir).map_err(io_err(&pairs_dir))?;
    }
    let width = 2.0 * SHAPE_RANGE / SHAPE_BINS as f64;
    for panel in &d.panels {
        let name = format!("{}{}_{}_{}.csv", panel.band, panel.rank, pair_label(names, (panel.i, panel.j)), panel.kind);
        let mut w = Csv::create(&pairs_dir.join(name), &["zx_lo", "zy_lo", "value"])?;
        for a in 0..SHAPE_BINS {
            for b in 0..SHAPE_BINS {
                let lo = |k: usize| (-SHAPE_RANGE + k as f64 * width).to_string();
                w.row([lo(a), lo(b), panel.grid[a * SHAPE_BINS + b].to_string()])?;
            }
        }
        w.finish()?;
    }
    Ok(())
}

fn memorisation(dir: &Path, m: &MemorisationReport) -> Result<(), PipelineError> {
    let mut w = Csv::create(&dir.join("nn_ratios.csv"), &["row", "d_train", "d_hold", "ratio"])?;
    for (k, ((t, h), r)) in m.nn.d_train.iter().zip(&m.nn.d_hold).zip(&m.nn.ratios).enumerate() {
        w.row([k.to_string(), t.to_string(), h.to_string(), r.to_string()])?;
    }
    w.finish()?;

    #[derive(Serialize)]
    struct Summary<'a> {
        prob_lt_1: f64,
        query: super::NnQuery,
        n_generated: usize,
        n_train_balanced: usize,
        n_holdout_balanced: usize,
        histogram: &'a [usize],
        histogram_bins: usize,
        histogram_max: f64,
        strata: &'a [crate::eval::memorisation::StratumSize],
        dropped_strata: &'a [(i64, u8)],
    }
    write_json(
        &dir.join("nn_summary.json"),
        &Summary {
            prob_lt_1: m.nn.prob_lt_1,
            query: m.query,
            n_generated: m.nn.ratios.len(),
            n_train_balanced: m.balanced.train.len(),
            n_holdout_balanced: m.balanced.holdout.len(),
            histogram: &m.histogram,
            histogram_bins: RATIO_BINS,
            histogram_max: RATIO_MAX,
            strata: &m.balanced.strata,
            dropped_strata: &m.balanced.dropped,
        },
    )
}
