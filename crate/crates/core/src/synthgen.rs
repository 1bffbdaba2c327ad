//! Parametric synthetic cohort with four structures (A–D).
//!
//! Trends blend through a logistic sigmoid; from age 65 a latent subgroup
//! `g = ±1` shifts every structure's mean by a shared signed offset, which
//! makes the conditional distributions two-component mixtures and couples
//! the structures. Structure D uses a skew-normal with shape 7.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Cohort;
use crate::ndmath::{sigmoid, Tensor};

/// Age at which `X = x - 65` is zero in every trend formula.
pub const PIVOT_AGE: f64 = 65.0;

const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("contract violation: {0}")]
    Contract(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    A,
    B,
    C,
    D,
}

impl Structure {
    pub const ALL: [Structure; 4] = [Structure::A, Structure::B, Structure::C, Structure::D];

    pub fn label(self) -> &'static str {
        match self {
            Structure::A => "A",
            Structure::B => "B",
            Structure::C => "C",
            Structure::D => "D",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Structure {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Structure::A),
            "B" | "b" => Ok(Structure::B),
            "C" | "c" => Ok(Structure::C),
            "D" | "d" => Ok(Structure::D),
            other => Err(SynthError::Contract(format!("unknown structure label {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub age_range: (f64, f64),
    pub seed: u64,
    pub mixture_onset_age: f64,
    pub skew_shape: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 47_000,
            age_range: (45.0, 82.0),
            seed: 0,
            mixture_onset_age: PIVOT_AGE,
            skew_shape: 7.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.age_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(SynthError::Contract(format!("age range [{lo}, {hi}] is empty")));
        }
        if !(lo..=hi).contains(&self.mixture_onset_age) {
            return Err(SynthError::Contract(format!(
                "mixture onset {} outside age range [{lo}, {hi}]",
                self.mixture_onset_age
            )));
        }
        if !self.skew_shape.is_finite() {
            return Err(SynthError::Contract("skew shape must be finite".into()));
        }
        // Every scale formula must stay positive on a 0.1-year grid.
        let steps = ((hi - lo) / 0.1).ceil() as usize;
        for i in 0..=steps {
            let age = (lo + 0.1 * i as f64).min(hi);
            for s in Structure::ALL {
                let sd = sd_at(s, age);
                if !(sd > 0.0 && sd.is_finite()) {
                    return Err(SynthError::Contract(format!("sigma_{s} = {sd} at age {age:.1}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    pub age: f64,
    pub sex: u8,
    pub subgroup: Option<i8>,
    pub y: [f64; 4],
}

fn sd_at(structure: Structure, x: f64) -> f64 {
    let big_x = x - PIVOT_AGE;
    match structure {
        Structure::A => 5.0 * big_x * sigmoid(big_x / 10.0) + big_x + 300.0,
        Structure::B | Structure::C => 25.0 * (x - 15.0) * sigmoid((x - 73.0) / 8.0) + 4500.0,
        Structure::D => 7000.0 * (0.03 * (x - 75.0)).exp() + 5000.0,
    }
}

/// Closed-form mean and scale of `structure` at `age` for subgroup sign `g`.
///
/// `g` must be 0 below age 65 and ±1 from 65 on (the step function is 1 at 0).
pub fn mean_sd(structure: Structure, age: f64, subgroup_sign: i8) -> Result<(f64, f64), SynthError> {
    if !age.is_finite() {
        return Err(SynthError::Contract(format!("age {age} is not finite")));
    }
    match (age >= PIVOT_AGE, subgroup_sign) {
        (false, 0) | (true, -1) | (true, 1) => Ok(moments(structure, age, subgroup_sign)),
        _ => Err(SynthError::Contract(format!("subgroup sign {subgroup_sign} invalid at age {age}"))),
    }
}

fn moments(structure: Structure, x: f64, subgroup_sign: i8) -> (f64, f64) {
    let big_x = x - PIVOT_AGE;
    let g = f64::from(subgroup_sign);
    let mu = match structure {
        Structure::A => -70.0 * big_x * sigmoid(big_x / 10.0) + 20.0 * big_x + 7000.0 + g * x * big_x / 5.0,
        Structure::B => -200.0 * (x - 15.0) * sigmoid((x - 73.0) / 8.0) + 45000.0 + g * x * big_x,
        Structure::C => 7000.0 * (-0.04 * (x - 73.0)).exp() + 25000.0 + g * x * big_x,
        Structure::D => 7000.0 * (0.02 * (x - 50.0)).exp() + 15000.0 + g * x * big_x,
    };
    (mu, sd_at(structure, x))
}

/// Skew-normal draw via `z = δ|u0| + sqrt(1-δ²) u1`, `δ = shape / sqrt(1 + shape²)`.
pub fn sample_skew_normal<R: Rng + ?Sized>(loc: f64, scale: f64, shape: f64, rng: &mut R) -> Result<f64, SynthError> {
    if !(scale > 0.0) {
        return Err(SynthError::Contract(format!("skew-normal scale {scale} must be positive")));
    }
    let delta = shape / (1.0 + shape * shape).sqrt();
    let u0: f64 = rng.sample(StandardNormal);
    let u1: f64 = rng.sample(StandardNormal);
    let z = delta * u0.abs() + (1.0 - delta * delta).sqrt() * u1;
    Ok(loc + scale * z)
}

/// Draws one IDP vector at a given age for subgroup sign `subgroup` (0 = no subgroup).
pub fn sample_at<R: Rng + ?Sized>(
    age: f64,
    subgroup: i8,
    skew_shape: f64,
    rng: &mut R,
) -> Result<[f64; 4], SynthError> {
    if !age.is_finite() || !(-1..=1).contains(&subgroup) {
        return Err(SynthError::Contract(format!("invalid draw at age {age}, subgroup {subgroup}")));
    }
    let mut y = [0.0; 4];
    for (slot, s) in y.iter_mut().zip(Structure::ALL) {
        let (mu, sd) = moments(s, age, subgroup);
        *slot = match s {
            Structure::D => sample_skew_normal(mu, sd, skew_shape, rng)?,
            _ => mu + sd * rng.sample::<f64, _>(StandardNormal),
        };
    }
    Ok(y)
}

/// Draws the latent subgroup for `age` (none below the onset).
pub fn draw_subgroup<R: Rng + ?Sized>(age: f64, onset: f64, rng: &mut R) -> Option<i8> {
    (age >= onset).then(|| if rng.gen_bool(0.5) { 1 } else { -1 })
}

/// Samples the full synthetic cohort; identical seeds give identical cohorts.
pub fn sample_cohort(config: &SynthConfig) -> Result<Vec<SynthRecord>, SynthError> {
    config.validate()?;
    let (lo, hi) = config.age_range;
    let mut out = Vec::with_capacity(config.n_samples);
    let mut chunk = 0u64;
    while out.len() < config.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(chunk);
        let take = CHUNK.min(config.n_samples - out.len());
        for _ in 0..take {
            let age = rng.gen_range(lo..hi);
            let sex = u8::from(rng.gen_bool(0.5));
            let subgroup = draw_subgroup(age, config.mixture_onset_age, &mut rng);
            let y = sample_at(age, subgroup.unwrap_or(0), config.skew_shape, &mut rng)?;
            out.push(SynthRecord { age, sex, subgroup, y });
        }
        chunk += 1;
    }
    Ok(out)
}

/// Packs records into a [`Cohort`] with IDP columns `A..D`.
pub fn to_cohort(records: &[SynthRecord]) -> Cohort {
    let n = records.len();
    let cov: Vec<f64> = records.iter().flat_map(|r| [r.age, f64::from(r.sex)]).collect();
    let idps: Vec<f64> = records.iter().flat_map(|r| r.y).collect();
    Cohort::new(
        Tensor::new(vec![n, 2], cov).expect("two covariates per record"),
        Tensor::new(vec![n, 4], idps).expect("four structures per record"),
        Structure::ALL.iter().map(|s| s.label().to_string()).collect(),
    )
    .expect("synthetic cohort is complete")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn hand_derived_values() {
        let (mu, sd) = mean_sd(Structure::A, 65.0, 1).unwrap();
        assert_eq!((mu, sd), (7000.0, 300.0));

        // X = 10, sigmoid(1) = 0.7310585786300049
        let s1 = 0.731_058_578_630_004_9;
        let (mu, sd) = mean_sd(Structure::A, 75.0, 1).unwrap();
        assert!(rel(mu, -700.0 * s1 + 200.0 + 7000.0 + 150.0) < 1e-12);
        assert!((mu - 6838.259).abs() < 1e-3);
        assert!((sd - 346.553).abs() < 1e-3);

        let (mu, sd) = mean_sd(Structure::C, 73.0, -1).unwrap();
        assert!(rel(mu, 31416.0) < 1e-12);
        assert!(rel(sd, 5225.0) < 1e-12);

        // x = 15 zeroes the blended trend of B.
        let (mu, sd) = mean_sd(Structure::B, 15.0, 0).unwrap();
        assert_eq!((mu, sd), (45000.0, 4500.0));
    }

    #[test]
    fn subgroup_sign_contract() {
        assert!(mean_sd(Structure::A, 64.9, 1).is_err());
        assert!(mean_sd(Structure::A, 65.0, 0).is_err());
        assert!(mean_sd(Structure::A, 70.0, 2).is_err());
        assert!("E".parse::<Structure>().is_err());
        assert_eq!("c".parse::<Structure>().unwrap(), Structure::C);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = SynthConfig { age_range: (70.0, 60.0), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SynthConfig { mixture_onset_age: 90.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_and_reproducible() {
        let cfg = SynthConfig { n_samples: 0, ..Default::default() };
        assert!(sample_cohort(&cfg).unwrap().is_empty());
        let cfg = SynthConfig { n_samples: 5000, seed: 3, ..Default::default() };
        assert_eq!(sample_cohort(&cfg).unwrap(), sample_cohort(&cfg).unwrap());
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(sample_cohort(&cfg).unwrap(), sample_cohort(&other).unwrap());
    }

    #[test]
    fn subgroup_present_iff_onset() {
        let cfg = SynthConfig { n_samples: 3000, seed: 1, ..Default::default() };
        for r in sample_cohort(&cfg).unwrap() {
            assert_eq!(r.subgroup.is_some(), r.age >= cfg.mixture_onset_age);
            assert!(r.sex <= 1);
            assert!(r.y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn skew_normal_scale_contract_and_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_skew_normal(0.0, 0.0, 1.0, &mut rng).is_err());
        assert!(sample_skew_normal(0.0, -1.0, 1.0, &mut rng).is_err());
        for shape in [-5.0, 0.0, 7.0] {
            for _ in 0..1000 {
                let v = sample_skew_normal(10.0, 0.001, shape, &mut rng).unwrap();
                assert!((v - 10.0).abs() < 0.01);
            }
        }
    }
}
