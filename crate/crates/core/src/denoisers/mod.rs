//! Noise-prediction backbones: a FiLM-conditioned MLP and a SAINT-style
//! transformer with column attention and optional intersample row attention.

mod mlp;
mod saint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Phase};
use crate::ndmath::{Graph, MathError, ParamSet, Tensor, Var};

pub use mlp::{film, FilmMlp, FilmMlpConfig};
pub use saint::{RowMode, Saint, SaintConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneConfig {
    Mlp(FilmMlpConfig),
    Saint(SaintConfig),
}

impl BackboneConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackboneConfig::Mlp(_) => "mlp",
            BackboneConfig::Saint(_) => "saint",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            BackboneConfig::Mlp(c) => c.validate(),
            BackboneConfig::Saint(c) => c.validate(),
        }
    }

    /// Default configuration for a backbone name (`mlp` or `saint`).
    pub fn default_for(name: &str) -> Option<Self> {
        match name {
            "mlp" => Some(BackboneConfig::Mlp(FilmMlpConfig::default())),
            "saint" => Some(BackboneConfig::Saint(SaintConfig::default())),
            _ => None,
        }
    }
}

/// A constructed backbone with its parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backbone {
    Mlp(FilmMlp),
    Saint(Saint),
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, out_dim: usize, cov_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self, String> {
        cfg.validate()?;
        Ok(match cfg {
            BackboneConfig::Mlp(c) => Backbone::Mlp(FilmMlp::new(c.clone(), out_dim, cov_dim, rng)),
            BackboneConfig::Saint(c) => Backbone::Saint(Saint::new(c.clone(), out_dim, cov_dim, rng)),
        })
    }

    fn inner(&self) -> &dyn Denoiser {
        match self {
            Backbone::Mlp(m) => m,
            Backbone::Saint(s) => s,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Denoiser {
        match self {
            Backbone::Mlp(m) => m,
            Backbone::Saint(s) => s,
        }
    }
}

impl Denoiser for Backbone {
    fn out_dim(&self) -> usize {
        self.inner().out_dim()
    }

    fn params(&self) -> &ParamSet {
        self.inner().params()
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        self.inner_mut().params_mut()
    }

    fn condition(&self, g: &mut Graph, p: &[Var], cov: Var) -> Result<Var, MathError> {
        self.inner().condition(g, p, cov)
    }

    fn predict(&self, g: &mut Graph, p: &[Var], y_t: Var, t_norm: Var, cond: Var, phase: &mut Phase) -> Result<Var, MathError> {
        self.inner().predict(g, p, y_t, t_norm, cond, phase)
    }

    fn observe_batch(&mut self, g: &Graph, norm_nodes: &[Var]) {
        self.inner_mut().observe_batch(g, norm_nodes)
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(dist)).collect()).expect("shape matches")
}

/// Registers `name.w` `[fan_in, fan_out]` and `name.b` `[fan_out]`; returns the weight index.
fn push_linear(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> usize {
    let w = p.push(format!("{name}.w"), init_uniform(&[fan_in, fan_out], fan_in, rng));
    p.push(format!("{name}.b"), init_uniform(&[fan_out], fan_in, rng));
    w
}

fn linear(g: &mut Graph, p: &[Var], w: usize, x: Var) -> Result<Var, MathError> {
    let h = g.matmul(x, p[w])?;
    g.add(h, p[w + 1])
}

/// Registers `name.gain` (ones) and `name.shift` (zeros); returns the gain index.
fn push_norm(p: &mut ParamSet, name: &str, width: usize) -> usize {
    let i = p.push(format!("{name}.gain"), Tensor::filled(&[width], 1.0));
    p.push(format!("{name}.shift"), Tensor::zeros(&[width]));
    i
}

fn layer_norm(g: &mut Graph, p: &[Var], i: usize, x: Var) -> Result<Var, MathError> {
    let h = g.layer_norm_last(x, 1e-5)?;
    let h = g.mul(h, p[i])?;
    g.add(h, p[i + 1])
}

/// Inverted dropout; identity outside training or at rate 0.
fn dropout(g: &mut Graph, x: Var, rate: f64, phase: &mut Phase) -> Result<Var, MathError> {
    match phase {
        Phase::Train(ctx) if rate > 0.0 => {
            let shape = g.value(x).shape().to_vec();
            let n = shape.iter().product();
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..n).map(|_| if ctx.rng.gen_bool(rate) { 0.0 } else { keep }).collect();
            let m = g.constant(Tensor::new(shape, mask)?);
            g.mul(x, m)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests;
