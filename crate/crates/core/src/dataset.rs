//! Cohort ingestion, z-scaling, stratified splitting and covariate binning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::Tensor;

pub const AGE: &str = "age";
pub const SEX: &str = "sex";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("file has no data rows")]
    Empty,
    #[error("required column {0:?} is missing")]
    MissingColumn(String),
    #[error("data row {row}: missing value in column {column:?}")]
    MissingValue { row: usize, column: String },
    #[error("data row {row}: column {column:?} value {value:?} is not a finite number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("data row {row}: sex must be 0 or 1, got {value}")]
    InvalidSex { row: usize, value: f64 },
    #[error("IDP column {0:?} has zero variance in the training data")]
    ZeroVariance(String),
    #[error("standardisation needs at least two training rows, got {0}")]
    TooFewRows(usize),
    #[error("row {row}: age {age} lies outside the covariate grid")]
    OutsideGrid { row: usize, age: f64 },
    #[error("inconsistent cohort: {0}")]
    Inconsistent(String),
}

/// Covariates (age in years, sex in {0,1}) and IDP measurements for `N` subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    covariates: Tensor,
    idps: Tensor,
    idp_names: Vec<String>,
    covariate_names: Vec<String>,
}

impl Cohort {
    pub fn new(covariates: Tensor, idps: Tensor, idp_names: Vec<String>) -> Result<Self, DataError> {
        let n = covariates.shape().first().copied().unwrap_or(0);
        if covariates.shape() != [n, 2] {
            return Err(DataError::Inconsistent(format!("covariates shape {:?}", covariates.shape())));
        }
        if idps.shape().len() != 2 || idps.shape()[0] != n || idps.shape()[1] != idp_names.len() {
            return Err(DataError::Inconsistent(format!(
                "idps shape {:?} for {} rows and {} names",
                idps.shape(),
                n,
                idp_names.len()
            )));
        }
        for i in 0..n {
            let sex = covariates.row(i)[1];
            if sex != 0.0 && sex != 1.0 {
                return Err(DataError::InvalidSex { row: i + 1, value: sex });
            }
        }
        if !covariates.is_finite() || !idps.is_finite() {
            return Err(DataError::Inconsistent("non-finite values".into()));
        }
        Ok(Self { covariates, idps, idp_names, covariate_names: vec![AGE.into(), SEX.into()] })
    }

    pub fn n(&self) -> usize {
        self.covariates.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.idp_names.len()
    }

    pub fn covariates(&self) -> &Tensor {
        &self.covariates
    }

    pub fn idps(&self) -> &Tensor {
        &self.idps
    }

    pub fn idp_names(&self) -> &[String] {
        &self.idp_names
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn age(&self, i: usize) -> f64 {
        self.covariates.row(i)[0]
    }

    pub fn sex(&self, i: usize) -> u8 {
        self.covariates.row(i)[1] as u8
    }

    pub fn ages(&self) -> Vec<f64> {
        self.covariates.column(0)
    }

    pub fn subset(&self, rows: &[usize]) -> Cohort {
        Cohort {
            covariates: self.covariates.select_rows(rows),
            idps: self.idps.select_rows(rows),
            idp_names: self.idp_names.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }

    /// Same subjects with replaced IDP values (e.g. after scaling).
    pub fn with_idps(&self, idps: Tensor) -> Result<Cohort, DataError> {
        Cohort::new(self.covariates.clone(), idps, self.idp_names.clone())
    }

    /// Restricts to rows whose age lies in `[lo, hi)`.
    pub fn age_band(&self, lo: f64, hi: f64) -> Cohort {
        let rows: Vec<usize> = (0..self.n()).filter(|&i| (lo..hi).contains(&self.age(i))).collect();
        self.subset(&rows)
    }

    pub fn age_range(&self) -> Option<(f64, f64)> {
        let ages = self.ages();
        let lo = ages.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo <= hi).then_some((lo, hi))
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(DataError::MissingValue { row, column: column.into() });
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NotNumeric { row, column: column.into(), value: s.into() }),
    }
}

/// Reads a cohort CSV with header `age,sex,<idp1>,...`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Cohort, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_csv(file)
}

pub fn read_csv(reader: impl std::io::Read) -> Result<Cohort, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.iter().all(String::is_empty) {
        return Err(DataError::Empty);
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.into()))
    };
    let (age_col, sex_col) = (find(AGE)?, find(SEX)?);
    let idp_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != age_col && c != sex_col).collect();
    let idp_names: Vec<String> = idp_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut cov = Vec::new();
    let mut idps = Vec::new();
    let mut n = 0;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let cell = |c: usize| parse_cell(rec.get(c).unwrap_or(""), row, &headers[c]);
        let age = cell(age_col)?;
        let sex = cell(sex_col)?;
        if sex != 0.0 && sex != 1.0 {
            return Err(DataError::InvalidSex { row, value: sex });
        }
        cov.extend([age, sex]);
        for &c in &idp_cols {
            idps.push(cell(c)?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    let d = idp_names.len();
    Cohort::new(
        Tensor::new(vec![n, 2], cov).expect("two covariates per row"),
        Tensor::new(vec![n, d], idps).expect("one value per IDP column"),
        idp_names,
    )
}

/// Writes the cohort CSV; values use shortest round-trip formatting.
pub fn write_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    write_csv_to(cohort, file)
}

pub fn write_csv_to(cohort: &Cohort, writer: impl std::io::Write) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![AGE.to_string(), SEX.to_string()];
    header.extend(cohort.idp_names.iter().cloned());
    w.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for i in 0..cohort.n() {
        fields.clear();
        fields.push(cohort.age(i).to_string());
        fields.push(cohort.sex(i).to_string());
        fields.extend(cohort.idps.row(i).iter().map(f64::to_string));
        w.write_record(&fields)?;
    }
    w.flush().map_err(|source| DataError::Io { path: "<csv writer>".into(), source })?;
    Ok(())
}

/// Per-IDP training mean and sample standard deviation (denominator `N-1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(values: &Tensor, names: &[String]) -> Result<Self, DataError> {
        let n = values.shape()[0];
        if n < 2 {
            return Err(DataError::TooFewRows(n));
        }
        let d = values.last_dim();
        let mut means = vec![0.0; d];
        for i in 0..n {
            means.iter_mut().zip(values.row(i)).for_each(|(m, v)| *m += v);
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut ss = vec![0.0; d];
        for i in 0..n {
            for (j, v) in values.row(i).iter().enumerate() {
                ss[j] += (v - means[j]).powi(2);
            }
        }
        let sds: Vec<f64> = ss.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
        for (j, sd) in sds.iter().enumerate() {
            // Relative floor catches columns that are constant up to rounding.
            if !(*sd > 1e-12 * means[j].abs().max(1.0)) {
                return Err(DataError::ZeroVariance(names.get(j).cloned().unwrap_or_else(|| j.to_string())));
            }
        }
        Ok(Self { means, sds })
    }

    pub fn transform(&self, values: &Tensor) -> Tensor {
        let d = self.means.len();
        let data = values
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - self.means[j]) / self.sds[j]))
            .collect();
        Tensor::new(values.shape().to_vec(), data).expect("same shape")
    }

    pub fn inverse(&self, values: &Tensor) -> Tensor {
        let d = self.means.len();
        let data = values
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| v * self.sds[j] + self.means[j]))
            .collect();
        Tensor::new(values.shape().to_vec(), data).expect("same shape")
    }

    pub fn transform_cohort(&self, cohort: &Cohort) -> Result<Cohort, DataError> {
        cohort.with_idps(self.transform(cohort.idps()))
    }
}

/// Fits the standardizer on `train` and applies it to `train` and every cohort in `others`.
pub fn fit_apply_zscale(train: &Cohort, others: &[Cohort]) -> Result<(Standardizer, Cohort, Vec<Cohort>), DataError> {
    let st = Standardizer::fit(train.idps(), train.idp_names())?;
    let scaled_train = st.transform_cohort(train)?;
    let scaled_others = others.iter().map(|c| st.transform_cohort(c)).collect::<Result<_, _>>()?;
    Ok((st, scaled_train, scaled_others))
}

/// Centre of the one-year bin containing `age`; bins are `[c - 0.5, c + 0.5)`.
pub fn age_bin(age: f64) -> i64 {
    (age + 0.5).floor() as i64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub age: f64,
    pub sex: u8,
}

/// Cartesian grid of one-year age bins and both sexes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateGrid {
    pub cells: Vec<GridCell>,
    pub bin_width: f64,
}

impl CovariateGrid {
    /// Grid whose bins cover `[min_age, max_age]`.
    pub fn covering(min_age: f64, max_age: f64) -> Self {
        let (lo, hi) = (age_bin(min_age), age_bin(max_age));
        let cells = (lo..=hi)
            .flat_map(|a| [0u8, 1].map(|sex| GridCell { age: a as f64, sex }))
            .collect();
        Self { cells, bin_width: 1.0 }
    }

    pub fn age_centers(&self) -> Vec<i64> {
        let mut c: Vec<i64> = self.cells.iter().map(|c| c.age as i64).collect();
        c.dedup();
        c
    }

    pub fn cell_index(&self, age: f64, sex: u8) -> Option<usize> {
        let b = age_bin(age) as f64;
        self.cells.iter().position(|c| c.age == b && c.sex == sex)
    }
}

/// Row indices per grid cell; every row lands in exactly one cell.
pub fn bin_membership(cohort: &Cohort, grid: &CovariateGrid) -> Result<Vec<Vec<usize>>, DataError> {
    let mut out = vec![Vec::new(); grid.cells.len()];
    let lookup: BTreeMap<(i64, u8), usize> =
        grid.cells.iter().enumerate().map(|(i, c)| ((c.age as i64, c.sex), i)).collect();
    for i in 0..cohort.n() {
        let key = (age_bin(cohort.age(i)), cohort.sex(i));
        let cell = lookup.get(&key).ok_or(DataError::OutsideGrid { row: i, age: cohort.age(i) })?;
        out[*cell].push(i);
    }
    Ok(out)
}

/// An evaluation bin: one age bin, optionally restricted to one sex.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBin {
    pub age: f64,
    pub sex: Option<u8>,
    /// Grid cells feeding this bin (one, or both sexes when pooled).
    pub cells: Vec<usize>,
    pub rows: Vec<usize>,
}

/// Groups rows into age bins, stratified by sex or pooled over it.
pub fn eval_bins(cohort: &Cohort, grid: &CovariateGrid, by_sex: bool) -> Result<Vec<EvalBin>, DataError> {
    let membership = bin_membership(cohort, grid)?;
    if by_sex {
        return Ok(grid
            .cells
            .iter()
            .zip(membership)
            .enumerate()
            .map(|(i, (c, rows))| EvalBin { age: c.age, sex: Some(c.sex), cells: vec![i], rows })
            .collect());
    }
    let mut bins: Vec<EvalBin> = Vec::new();
    for (i, (c, rows)) in grid.cells.iter().zip(membership).enumerate() {
        match bins.last_mut() {
            Some(b) if b.age == c.age => {
                b.cells.push(i);
                b.rows.extend(rows);
            }
            _ => bins.push(EvalBin { age: c.age, sex: None, cells: vec![i], rows }),
        }
    }
    for b in &mut bins {
        b.rows.sort_unstable();
    }
    Ok(bins)
}

/// Stratum key: one-year age bin and sex.
pub fn stratum_key(cohort: &Cohort, i: usize) -> (i64, u8) {
    (age_bin(cohort.age(i)), cohort.sex(i))
}

pub fn strata(cohort: &Cohort) -> BTreeMap<(i64, u8), Vec<usize>> {
    let mut map: BTreeMap<(i64, u8), Vec<usize>> = BTreeMap::new();
    for i in 0..cohort.n() {
        map.entry(stratum_key(cohort, i)).or_default().push(i);
    }
    map
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Splits every (age bin x sex) stratum so that `round(fraction * size)` rows go to train.
pub fn stratified_split(cohort: &Cohort, fraction: f64, seed: u64) -> Result<Split, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Inconsistent(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (_, mut rows) in strata(cohort) {
        rows.shuffle(&mut rng);
        let k = (fraction * rows.len() as f64).round() as usize;
        train.extend_from_slice(&rows[..k]);
        holdout.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    holdout.sort_unstable();
    Ok(Split { train, holdout })
}

/// Keeps a stratified `fraction` of a cohort (training-fraction experiments).
pub fn stratified_subsample(cohort: &Cohort, fraction: f64, seed: u64) -> Result<Cohort, DataError> {
    if fraction >= 1.0 {
        return Ok(cohort.clone());
    }
    let split = stratified_split(cohort, fraction, seed)?;
    Ok(cohort.subset(&split.train))
}
