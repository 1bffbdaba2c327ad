//! Conditional samplers: the trained model, or the synthetic generator itself.

use rand_chacha::ChaCha8Rng;

use super::PipelineError;
use crate::dataset::{CovariateGrid, Standardizer};
use crate::denoisers::Backbone;
use crate::diffusion::{cell_rng, sample_batch, CovariateEncoder, Denoiser, NoiseSchedule};
use crate::ndmath::Tensor;
use crate::synthgen::{draw_subgroup, sample_at, SynthConfig};

/// Draws one IDP vector per covariate row.
pub trait ConditionalSampler {
    fn d(&self) -> usize;

    /// `covariates` is `[n, 2]` native (age, sex); output is `[n, D]` in standardised units.
    fn sample(&self, covariates: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, PipelineError>;
}

pub struct ModelSampler<'a> {
    pub backbone: &'a Backbone,
    pub encoder: &'a CovariateEncoder,
    pub schedule: &'a NoiseSchedule,
}

impl ConditionalSampler for ModelSampler<'_> {
    fn d(&self) -> usize {
        self.backbone.out_dim()
    }

    fn sample(&self, covariates: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, PipelineError> {
        Ok(sample_batch(self.backbone, &self.encoder.encode(covariates), self.schedule, rng)?)
    }
}

/// Exact draws from the synthetic generating process, standardised like the model's data.
pub struct TrueSynthSampler<'a> {
    pub config: &'a SynthConfig,
    pub standardizer: &'a Standardizer,
}

impl ConditionalSampler for TrueSynthSampler<'_> {
    fn d(&self) -> usize {
        4
    }

    fn sample(&self, covariates: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor, PipelineError> {
        let n = covariates.outer_len();
        let mut out = Vec::with_capacity(n * 4);
        for i in 0..n {
            let age = covariates.row(i)[0];
            let sg = draw_subgroup(age, self.config.mixture_onset_age, rng).unwrap_or(0);
            out.extend(sample_at(age, sg, self.config.skew_shape, rng)?);
        }
        Ok(self.standardizer.transform(&Tensor::new(vec![n, 4], out).expect("four values per row")))
    }
}

/// `m` draws at every grid cell; cell `i` uses stream `i` of `seed`.
pub fn sample_grid(sampler: &dyn ConditionalSampler, grid: &CovariateGrid, m: usize, seed: u64) -> Result<Vec<Tensor>, PipelineError> {
    if m == 0 {
        return Err(PipelineError::Config("need at least one sample per cell".into()));
    }
    grid.cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cov = Tensor::new(vec![m, 2], [c.age, f64::from(c.sex)].repeat(m)).expect("two covariates");
            sampler.sample(&cov, &mut cell_rng(seed, i as u64))
        })
        .collect()
}

/// One draw per covariate row on stream `stream` of `seed`.
pub fn sample_rows(sampler: &dyn ConditionalSampler, covariates: &Tensor, seed: u64, stream: u64) -> Result<Tensor, PipelineError> {
    sampler.sample(covariates, &mut cell_rng(seed, stream))
}
