//! Run orchestration: configuration, checkpoints, sample stores, evaluation
//! and report emission under a run directory.

mod commands;
mod evaluate;
mod reports;
mod sampler;
mod store;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DataError;
use crate::denoisers::BackboneConfig;
use crate::diffusion::{linear_schedule, DiffusionError, NoiseSchedule, TrainConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::eval::EvalError;
use crate::synthgen::{SynthConfig, SynthError};

pub use commands::{
    cmd_eval, cmd_report, cmd_sample, cmd_synth, cmd_train, load_data, prepare, run_config, Checkpoint, Prepared,
    CHECKPOINT_FORMAT,
};
pub use evaluate::{
    evaluate, CalibrationReport, DependenceReport, EvalInputs, EvalReport, Headline, KsReport, MemorisationReport,
    REPORT_SCHEMA,
};
pub use reports::write_reports;
pub use sampler::{sample_grid, sample_rows, ConditionalSampler, ModelSampler, TrueSynthSampler};
pub use store::{Block, SampleStore, StoreIndex, STORE_FORMAT};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
    #[error("malformed artifact: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Diffusion(DiffusionError::Diverged { .. } | DiffusionError::Math(_)) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synth(SynthConfig),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, PipelineError> {
        Ok(linear_schedule(self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
    /// Stratified fraction of the training split actually used (1 = all).
    pub subsample: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0, subsample: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Draws per (age bin x sex) grid cell.
    pub m_per_cell: usize,
    pub seed: u64,
    /// Also draw one sample at every holdout subject's covariates.
    pub holdout_draws: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { m_per_cell: 1000, seed: 1, holdout_draws: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NnQuery {
    /// One generated draw per balanced holdout subject.
    Holdout,
    /// All grid-cell samples.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub calibration: bool,
    pub ks: bool,
    pub dependence: bool,
    pub memorisation: bool,
    pub min_bin_count: usize,
    /// Stratify calibration and KS bins by sex as well as age.
    pub by_sex: bool,
    pub smoothing_sigma: f64,
    pub ks_permutations: usize,
    pub ks_gen_cap_factor: usize,
    pub alpha: f64,
    /// Age band pooled for the joint comparisons (inclusive bounds).
    pub dependence_min_age: Option<f64>,
    pub dependence_max_age: Option<f64>,
    pub distance_cap: usize,
    pub mantel_permutations: usize,
    pub ranked_k: usize,
    pub nn_query: NnQuery,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            calibration: true,
            ks: true,
            dependence: true,
            memorisation: true,
            min_bin_count: crate::eval::calibration::MIN_BIN_COUNT,
            by_sex: false,
            smoothing_sigma: 2.0,
            ks_permutations: crate::eval::distribution::DEFAULT_PERMUTATIONS,
            ks_gen_cap_factor: crate::eval::distribution::GEN_CAP_FACTOR,
            alpha: 0.05,
            dependence_min_age: None,
            dependence_max_age: None,
            distance_cap: crate::eval::dependence::DISTANCE_CAP,
            mantel_permutations: crate::eval::dependence::MANTEL_PERMUTATIONS,
            ranked_k: 1,
            nn_query: NnQuery::Holdout,
            seed: 2,
        }
    }
}

impl EvalConfig {
    /// Enables exactly one evaluation (`calibration`, `ks`, `dependence`, `memorisation`) or `all`.
    pub fn select(&mut self, which: &str) -> Result<(), PipelineError> {
        let all = which == "all";
        let known = ["all", "calibration", "ks", "dependence", "memorisation"];
        if !known.contains(&which) {
            return Err(PipelineError::Config(format!("unknown evaluation {which:?}; expected one of {known:?}")));
        }
        self.calibration = all || which == "calibration";
        self.ks = all || which == "ks";
        self.dependence = all || which == "dependence";
        self.memorisation = all || which == "memorisation";
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSource,
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            backbone: BackboneConfig::default_for("mlp").expect("mlp is a known backbone"),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            sampling: SamplingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if let DataSource::Csv { path } = &self.data {
            if !path.exists() {
                return Err(PipelineError::Config(format!("dataset {} does not exist", path.display())));
            }
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.backbone.validate().map_err(PipelineError::Config)?;
        self.schedule.build()?;
        self.train.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(PipelineError::Config(format!("train fraction {} outside (0, 1)", self.split.train_fraction)));
        }
        if !(self.split.subsample > 0.0 && self.split.subsample <= 1.0) {
            return Err(PipelineError::Config(format!("subsample fraction {} outside (0, 1]", self.split.subsample)));
        }
        if self.sampling.m_per_cell == 0 {
            return Err(PipelineError::Config("m_per_cell must be at least 1".into()));
        }
        let e = &self.eval;
        if e.ks_permutations == 0 || e.mantel_permutations == 0 || e.ks_gen_cap_factor == 0 || e.distance_cap < 2 {
            return Err(PipelineError::Config("permutation counts, caps and distance_cap must be positive".into()));
        }
        if !(e.alpha > 0.0 && e.alpha < 1.0) || !(e.smoothing_sigma >= 0.0) {
            return Err(PipelineError::Config("alpha must be in (0, 1) and smoothing_sigma >= 0".into()));
        }
        Ok(())
    }

    /// Deep-merges a JSON object over this configuration.
    pub fn overlay(&self, patch: &serde_json::Value) -> Result<Self, PipelineError> {
        overlay_json(self, patch)
    }
}

/// Deep-merges `patch` over the JSON form of `base`: object keys replace recursively,
/// and an object with a different `kind` tag replaces the whole variant.
pub fn overlay_json<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: &serde_json::Value) -> Result<T, PipelineError> {
    fn merge(base: &mut serde_json::Value, patch: &serde_json::Value) {
        match (base, patch) {
            (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
                for (k, v) in p {
                    let retag = v.get("kind").is_some() && b.get(k).and_then(|x| x.get("kind")) != v.get("kind");
                    match b.get_mut(k) {
                        Some(slot) if !retag => merge(slot, v),
                        _ => {
                            b.insert(k.clone(), v.clone());
                        }
                    }
                }
            }
            (b, p) => *b = p.clone(),
        }
    }
    let mut value = serde_json::to_value(base).map_err(|e| PipelineError::Config(e.to_string()))?;
    merge(&mut value, patch);
    serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: Option<RunConfig>,
    pub stages: Vec<StageRecord>,
    pub train_seconds: Option<f64>,
    pub sample_seconds: Option<f64>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load_or_new(dir: &Path) -> Self {
        read_json(&dir.join(Self::FILE)).unwrap_or(Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            stages: Vec::new(),
            train_seconds: None,
            sample_seconds: None,
        })
    }
}

/// Runs one stage and records its outcome in the manifest, success or not.
pub(crate) fn run_stage<T>(
    dir: &Path,
    name: &str,
    config: Option<&RunConfig>,
    f: impl FnOnce() -> Result<T, PipelineError>,
) -> Result<T, PipelineError> {
    let start = Instant::now();
    let out = f();
    let seconds = start.elapsed().as_secs_f64();
    let mut m = RunManifest::load_or_new(dir);
    m.version = env!("CARGO_PKG_VERSION").to_string();
    if let Some(c) = config {
        m.config = Some(c.clone());
    }
    match name {
        "train" => m.train_seconds = Some(seconds),
        "sample" => m.sample_seconds = Some(seconds),
        _ => {}
    }
    m.stages.retain(|s| s.name != name);
    m.stages.push(StageRecord {
        name: name.to_string(),
        status: if out.is_ok() { "ok" } else { "failed" }.to_string(),
        seconds,
        error: out.as_ref().err().map(|e| e.to_string()),
    });
    if dir.is_dir() {
        write_json(&dir.join(RunManifest::FILE), &m)?;
    }
    out
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(dir.to_path_buf())),
            Err(e) => Err(PipelineError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
