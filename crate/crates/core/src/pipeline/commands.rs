//! The `synth`, `train`, `sample`, `eval` and `report` stages.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, EvalInputs, EvalReport, Headline, REPORT_SCHEMA};
use super::reports::write_reports;
use super::sampler::{sample_grid, sample_rows, ConditionalSampler, ModelSampler, TrueSynthSampler};
use super::store::{cell_name, SampleStore, StoreIndex, HOLDOUT_BLOCK, STORE_FORMAT};
use super::{read_json, run_stage, write_json, DataSource, PipelineError, RunConfig, RunLock};
use crate::dataset::{load_csv, stratified_split, stratified_subsample, write_csv, Cohort, CovariateGrid, Split, Standardizer};
use crate::denoisers::Backbone;
use crate::diffusion::{cell_rng, train, CovariateEncoder, TrainState};
use crate::synthgen::{sample_cohort, to_cohort, SynthConfig};

pub const CHECKPOINT_FORMAT: &str = "diffnorm-checkpoint/v1";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: RunConfig,
    pub idp_names: Vec<String>,
    pub standardizer: Standardizer,
    pub encoder: CovariateEncoder,
    pub backbone: Backbone,
    pub state: TrainState,
}

impl Checkpoint {
    /// Fresh, untrained model for a prepared dataset.
    pub fn new(config: &RunConfig, prep: &Prepared) -> Result<Self, PipelineError> {
        // Epochs use streams 1.., initialisation takes stream 0.
        let mut rng = cell_rng(config.train.seed, 0);
        let backbone = Backbone::new(&config.backbone, prep.train.d(), 2, &mut rng).map_err(PipelineError::Config)?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: config.clone(),
            idp_names: prep.train.idp_names().to_vec(),
            standardizer: prep.standardizer.clone(),
            encoder: CovariateEncoder::fit(prep.train.covariates()),
            backbone,
            state: TrainState::default(),
        })
    }

    /// Trains up to `config.train.epochs`; `on_epoch` returning false stops early.
    pub fn fit(&mut self, prep: &Prepared, on_epoch: impl FnMut(usize, f64) -> bool) -> Result<(), PipelineError> {
        let schedule = self.config.schedule.build()?;
        let cov = self.encoder.encode(prep.train.covariates());
        let state = std::mem::take(&mut self.state);
        self.state = train(&mut self.backbone, prep.train.idps(), &cov, &schedule, &self.config.train, state, on_epoch)?;
        Ok(())
    }

    pub fn sampler<'a>(&'a self, schedule: &'a crate::diffusion::NoiseSchedule) -> ModelSampler<'a> {
        ModelSampler { backbone: &self.backbone, encoder: &self.encoder, schedule }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let ck: Self = read_json(path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(PipelineError::Format(format!("checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}", ck.format)));
        }
        Ok(ck)
    }
}

/// The split and standardised cohorts a run works on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cohort: Cohort,
    pub split: Split,
    pub standardizer: Standardizer,
    /// Standardised IDPs, native covariates.
    pub train: Cohort,
    pub holdout: Cohort,
}

impl Prepared {
    /// Grid covering every age in the cohort.
    pub fn grid(&self) -> CovariateGrid {
        let (lo, hi) = self.cohort.age_range().expect("non-empty cohort");
        CovariateGrid::covering(lo, hi)
    }
}

pub fn load_data(source: &DataSource) -> Result<Cohort, PipelineError> {
    match source {
        DataSource::Csv { path } => Ok(load_csv(path)?),
        DataSource::Synth(s) => Ok(to_cohort(&sample_cohort(s)?)),
    }
}

/// Loads the data, splits it by (age bin x sex) strata and fits the IDP standardiser on the training part.
pub fn prepare(config: &RunConfig) -> Result<Prepared, PipelineError> {
    let cohort = load_data(&config.data)?;
    let split = stratified_split(&cohort, config.split.train_fraction, config.split.seed)?;
    let train_raw = stratified_subsample(&cohort.subset(&split.train), config.split.subsample, config.split.seed.wrapping_add(1))?;
    let holdout_raw = cohort.subset(&split.holdout);
    let standardizer = Standardizer::fit(train_raw.idps(), train_raw.idp_names())?;
    let train = standardizer.transform_cohort(&train_raw)?;
    let holdout = standardizer.transform_cohort(&holdout_raw)?;
    Ok(Prepared { cohort, split, standardizer, train, holdout })
}

pub fn cmd_synth(config: &SynthConfig, out: &Path) -> Result<usize, PipelineError> {
    let records = sample_cohort(config)?;
    write_csv(&to_cohort(&records), out)?;
    Ok(records.len())
}

/// Trains (or resumes) the model of a run directory and writes `checkpoint.json`.
pub fn cmd_train(
    config: &RunConfig,
    dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Checkpoint, PipelineError> {
    let _lock = RunLock::acquire(dir)?;
    run_stage(dir, "train", Some(config), || {
        config.validate()?;
        write_json(&dir.join(CONFIG_FILE), config)?;
        let prep = prepare(config)?;
        let ck_path = dir.join(CHECKPOINT_FILE);
        let mut ck = if resume && ck_path.exists() {
            let mut ck = Checkpoint::load(&ck_path)?;
            if ck.standardizer != prep.standardizer {
                return Err(PipelineError::Format("checkpoint was trained on different data".into()));
            }
            ck.config.train.epochs = config.train.epochs;
            ck
        } else {
            Checkpoint::new(config, &prep)?
        };
        let result = ck.fit(&prep, |e, loss| {
            on_epoch(e, loss);
            stop_after.is_none_or(|s| e + 1 < s)
        });
        // Whatever finished is kept, so a diverged run can still be inspected.
        ck.save(&ck_path)?;
        result.map(|_| ck)
    })
}

fn holdout_stream(grid: &CovariateGrid) -> u64 {
    grid.cells.len() as u64
}

/// Draws the grid (and holdout-covariate) samples of a run into `samples.bin`.
///
/// With `oracle`, the synthetic generator replaces the model; no checkpoint is needed.
pub fn cmd_sample(config: &RunConfig, dir: &Path, oracle: bool) -> Result<SampleStore, PipelineError> {
    let _lock = RunLock::acquire(dir)?;
    run_stage(dir, "sample", Some(config), || {
        config.validate()?;
        write_json(&dir.join(CONFIG_FILE), config)?;
        let prep = prepare(config)?;
        let schedule = config.schedule.build()?;
        let ck = if oracle { None } else { Some(Checkpoint::load(&dir.join(CHECKPOINT_FILE))?) };
        let synth = match (&config.data, oracle) {
            (DataSource::Synth(s), true) => Some(s.clone()),
            (_, true) => return Err(PipelineError::Config("the oracle sampler needs a synthetic data source".into())),
            _ => None,
        };
        let sampler: Box<dyn ConditionalSampler> = match (&ck, &synth) {
            (Some(ck), _) => {
                if ck.standardizer != prep.standardizer {
                    return Err(PipelineError::Format("checkpoint was trained on different data".into()));
                }
                Box::new(ck.sampler(&schedule))
            }
            (None, Some(s)) => Box::new(TrueSynthSampler { config: s, standardizer: &prep.standardizer }),
            (None, None) => unreachable!("either a checkpoint or the oracle"),
        };
        let grid = prep.grid();
        let mut store = SampleStore::new(StoreIndex {
            format: STORE_FORMAT.to_string(),
            d: prep.train.d(),
            idp_names: prep.train.idp_names().to_vec(),
            standardizer: prep.standardizer.clone(),
            source: if oracle { "oracle" } else { "model" }.to_string(),
            seed: config.sampling.seed,
            grid: grid.clone(),
            blocks: Vec::new(),
        });
        let cells = sample_grid(sampler.as_ref(), &grid, config.sampling.m_per_cell, config.sampling.seed)?;
        for (i, (c, t)) in grid.cells.iter().zip(&cells).enumerate() {
            store.push(cell_name(i), Some(c.age), Some(c.sex), t)?;
        }
        if config.sampling.holdout_draws {
            let draws = sample_rows(sampler.as_ref(), prep.holdout.covariates(), config.sampling.seed, holdout_stream(&grid))?;
            store.push(HOLDOUT_BLOCK.to_string(), None, None, &draws)?;
        }
        store.write(dir)?;
        Ok(store)
    })
}

/// Evaluates the stored samples against the run's holdout and writes all reports.
pub fn cmd_eval(config: &RunConfig, dir: &Path) -> Result<EvalReport, PipelineError> {
    let _lock = RunLock::acquire(dir)?;
    run_stage(dir, "eval", Some(config), || {
        config.validate()?;
        let prep = prepare(config)?;
        let store = SampleStore::read(dir)?;
        if store.index.standardizer != prep.standardizer {
            return Err(PipelineError::Format("sample store was drawn for different data".into()));
        }
        let cells = store.cell_samples()?;
        let draws = store.block(HOLDOUT_BLOCK);
        if draws.as_ref().is_some_and(|d| d.outer_len() != prep.holdout.n()) {
            return Err(PipelineError::Format("holdout draws do not match the holdout split".into()));
        }
        let inputs = EvalInputs {
            grid: &store.index.grid,
            cell_samples: &cells,
            train: &prep.train,
            holdout: &prep.holdout,
            holdout_draws: draws.as_ref(),
            standardizer: &prep.standardizer,
        };
        let report = evaluate(&inputs, &config.eval)?;
        write_reports(dir, &report)?;
        Ok(report)
    })
}

/// Reads back the headline numbers of an evaluated run.
pub fn cmd_report(dir: &Path) -> Result<Headline, PipelineError> {
    let h: Headline = read_json(&dir.join("report.json"))?;
    if h.schema != REPORT_SCHEMA {
        return Err(PipelineError::Format(format!("report schema {:?}, expected {REPORT_SCHEMA:?}", h.schema)));
    }
    Ok(h)
}

/// `config.json` of an existing run directory, if any.
pub fn run_config(dir: &Path) -> Result<Option<RunConfig>, PipelineError> {
    let p = dir.join(CONFIG_FILE);
    if p.exists() {
        read_json(&p).map(Some)
    } else {
        Ok(None)
    }
}
