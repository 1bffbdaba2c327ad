use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dropout, init_uniform, linear, push_linear};
use crate::diffusion::{Denoiser, Phase};
use crate::ndmath::{Graph, MathError, ParamSet, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilmMlpConfig {
    pub hidden_widths: Vec<usize>,
    pub dropout_rate: f64,
    pub use_batchnorm: bool,
    pub covariate_mlp_widths: Vec<usize>,
}

impl Default for FilmMlpConfig {
    fn default() -> Self {
        Self { hidden_widths: vec![256, 256, 256], dropout_rate: 0.1, use_batchnorm: false, covariate_mlp_widths: vec![64] }
    }
}

impl FilmMlpConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) || self.covariate_mlp_widths.contains(&0) {
            return Err(format!("layer widths must be positive and non-empty: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Layer {
    w: usize,
    alpha: usize,
    width: usize,
    film_offset: usize,
}

/// MLP over `[y_t, t/T]` whose hidden layers are modulated by
/// `h ↦ (1 + Δγ(c)) ⊙ h + β(c)`, with `(Δγ, β)` from a covariate MLP.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilmMlp {
    config: FilmMlpConfig,
    out_dim: usize,
    params: ParamSet,
    layers: Vec<Layer>,
    /// `(w, alpha)` per covariate hidden layer.
    cov_layers: Vec<(usize, usize)>,
    film_head: usize,
    time_w: usize,
    out: usize,
    /// Running `(mean, var)` per hidden layer when batch norm is on.
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

impl FilmMlp {
    pub fn new(config: FilmMlpConfig, out_dim: usize, cov_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut fan_in = out_dim;
        let mut film_offset = 0;
        let mut time_w = 0;
        for (k, &width) in config.hidden_widths.iter().enumerate() {
            let w = if k == 0 {
                // The input is [y_t, t/T]; the t/T row is kept as its own tensor.
                let w = params.push("hidden0.w", init_uniform(&[fan_in, width], fan_in + 1, rng));
                params.push("hidden0.b", init_uniform(&[width], fan_in + 1, rng));
                time_w = params.push("hidden0.wt", init_uniform(&[1, width], fan_in + 1, rng));
                w
            } else {
                push_linear(&mut params, &format!("hidden{k}"), fan_in, width, rng)
            };
            let alpha = params.push(format!("hidden{k}.prelu"), Tensor::vector(vec![0.25]));
            layers.push(Layer { w, alpha, width, film_offset });
            film_offset += 2 * width;
            fan_in = width;
        }
        let mut cov_layers = Vec::new();
        let mut cov_in = cov_dim;
        for (k, &width) in config.covariate_mlp_widths.iter().enumerate() {
            let w = push_linear(&mut params, &format!("cov{k}"), cov_in, width, rng);
            let alpha = params.push(format!("cov{k}.prelu"), Tensor::vector(vec![0.25]));
            cov_layers.push((w, alpha));
            cov_in = width;
        }
        // Zero head: FiLM starts as the identity.
        let film_head = params.push("film.w", Tensor::zeros(&[cov_in, film_offset]));
        params.push("film.b", Tensor::zeros(&[film_offset]));
        let out = push_linear(&mut params, "out", fan_in, out_dim, rng);
        let running = if config.use_batchnorm {
            layers.iter().map(|l| (vec![0.0; l.width], vec![1.0; l.width])).collect()
        } else {
            Vec::new()
        };
        Self { config, out_dim, params, layers, cov_layers, film_head, time_w, out, running }
    }

    pub fn config(&self) -> &FilmMlpConfig {
        &self.config
    }

    fn batch_norm(&self, g: &mut Graph, k: usize, h: Var, phase: &mut Phase) -> Result<Var, MathError> {
        if let Phase::Train(ctx) = phase {
            let out = g.batch_norm(h, BN_EPS)?;
            ctx.norm_nodes.push(out);
            return Ok(out);
        }
        let (mean, var) = &self.running[k];
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let shift: Vec<f64> = mean.iter().zip(&inv).map(|(m, s)| -m * s).collect();
        let scale = g.constant(Tensor::vector(inv));
        let shift = g.constant(Tensor::vector(shift));
        let h = g.mul(h, scale)?;
        g.add(h, shift)
    }
}

/// `(1 + Δγ) ⊙ h + β`.
pub fn film(g: &mut Graph, h: Var, delta_gamma: Var, beta: Var) -> Result<Var, MathError> {
    let scaled = g.mul(h, delta_gamma)?;
    let h = g.add(h, scaled)?;
    g.add(h, beta)
}

impl Denoiser for FilmMlp {
    fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn condition(&self, g: &mut Graph, p: &[Var], cov: Var) -> Result<Var, MathError> {
        let mut h = cov;
        for &(w, alpha) in &self.cov_layers {
            h = linear(g, p, w, h)?;
            h = g.prelu(h, p[alpha])?;
        }
        linear(g, p, self.film_head, h)
    }

    fn predict(&self, g: &mut Graph, p: &[Var], y_t: Var, t_norm: Var, cond: Var, phase: &mut Phase) -> Result<Var, MathError> {
        // [y_t, t] · W is split into y_t · W_y + t · W_t.
        let first = &self.layers[0];
        let a = g.matmul(y_t, p[first.w])?;
        let b = g.matmul(t_norm, p[self.time_w])?;
        let mut h = g.add(a, b)?;
        h = g.add(h, p[first.w + 1])?;
        for (k, layer) in self.layers.iter().enumerate() {
            if k > 0 {
                h = linear(g, p, layer.w, h)?;
            }
            if self.config.use_batchnorm {
                h = self.batch_norm(g, k, h, phase)?;
            }
            let dg = g.slice_last(cond, layer.film_offset, layer.film_offset + layer.width)?;
            let beta = g.slice_last(cond, layer.film_offset + layer.width, layer.film_offset + 2 * layer.width)?;
            h = film(g, h, dg, beta)?;
            h = g.prelu(h, p[layer.alpha])?;
            h = dropout(g, h, self.config.dropout_rate, phase)?;
        }
        linear(g, p, self.out, h)
    }

    fn observe_batch(&mut self, g: &Graph, norm_nodes: &[Var]) {
        for ((mean, var), &node) in self.running.iter_mut().zip(norm_nodes) {
            if let Some((bm, bv)) = g.batch_stats(node) {
                for j in 0..mean.len() {
                    mean[j] = (1.0 - BN_MOMENTUM) * mean[j] + BN_MOMENTUM * bm[j];
                    var[j] = (1.0 - BN_MOMENTUM) * var[j] + BN_MOMENTUM * bv[j];
                }
            }
        }
    }
}
