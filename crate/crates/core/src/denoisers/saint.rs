use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dropout, init_uniform, layer_norm, linear, push_linear, push_norm};
use crate::diffusion::{Denoiser, Phase};
use crate::ndmath::{Graph, MathError, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaintConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub ff_width: usize,
    pub dropout_rate: f64,
    pub intersample_prob: f64,
}

impl Default for SaintConfig {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, depth: 3, ff_width: 128, dropout_rate: 0.1, intersample_prob: 0.5 }
    }
}

impl SaintConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.ff_width == 0 {
            return Err("ff_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&self.intersample_prob) {
            return Err(format!("rates out of range: {self:?}"));
        }
        Ok(())
    }
}

/// Row-attention mode for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowMode {
    /// Summaries attend across the whole batch.
    Intersample,
    /// Each row attends only to its own summary.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    ln1: usize,
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2: usize,
    ff1: usize,
    ff_alpha: usize,
    ff2: usize,
    ln_row: usize,
    rq: usize,
    rk: usize,
    rv: usize,
    ro: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Tokenizer {
    weight: usize,
    bias: usize,
    column: usize,
    cov: usize,
    time: usize,
}

/// Feature-token transformer: column attention over the `D` IDP tokens and
/// row attention over per-subject summaries, with a per-token output head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Saint {
    config: SaintConfig,
    out_dim: usize,
    params: ParamSet,
    tok: Tokenizer,
    blocks: Vec<Block>,
    ln_out: usize,
    head_w: usize,
    head_b: usize,
}

impl Saint {
    pub fn new(config: SaintConfig, out_dim: usize, cov_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let (d, m) = (out_dim, config.d_model);
        let mut p = ParamSet::new();
        let tok = Tokenizer {
            weight: p.push("tok.weight", init_uniform(&[d, m], 1, rng)),
            bias: p.push("tok.bias", init_uniform(&[d, m], 1, rng)),
            column: p.push("tok.column", init_uniform(&[d, m], m, rng)),
            cov: push_linear(&mut p, "tok.cov", cov_dim, m, rng),
            time: p.push("tok.time", init_uniform(&[1, m], 1, rng)),
        };
        let blocks = (0..config.depth)
            .map(|i| {
                let n = |s: &str| format!("block{i}.{s}");
                Block {
                    ln1: push_norm(&mut p, &n("ln1"), m),
                    q: push_linear(&mut p, &n("q"), m, m, rng),
                    k: push_linear(&mut p, &n("k"), m, m, rng),
                    v: push_linear(&mut p, &n("v"), m, m, rng),
                    o: push_linear(&mut p, &n("o"), m, m, rng),
                    ln2: push_norm(&mut p, &n("ln2"), m),
                    ff1: push_linear(&mut p, &n("ff1"), m, config.ff_width, rng),
                    ff_alpha: p.push(n("ff.prelu"), Tensor::vector(vec![0.25])),
                    ff2: push_linear(&mut p, &n("ff2"), config.ff_width, m, rng),
                    ln_row: push_norm(&mut p, &n("ln_row"), m),
                    rq: push_linear(&mut p, &n("row_q"), m, m, rng),
                    rk: push_linear(&mut p, &n("row_k"), m, m, rng),
                    rv: push_linear(&mut p, &n("row_v"), m, m, rng),
                    ro: push_linear(&mut p, &n("row_o"), m, m, rng),
                }
            })
            .collect();
        let ln_out = push_norm(&mut p, "ln_out", m);
        let head_w = p.push("head.w", init_uniform(&[d, m], m, rng));
        let head_b = p.push("head.b", Tensor::zeros(&[d]));
        Self { config, out_dim, params: p, tok, blocks, ln_out, head_w, head_b }
    }

    pub fn config(&self) -> &SaintConfig {
        &self.config
    }

    /// `token_d = y_d w_d + b_d + e_d + cond + t · w_time`, shape `[B, D, m]`.
    pub fn tokenize(&self, g: &mut Graph, p: &[Var], y_t: Var, t_norm: Var, cond: Var) -> Result<Var, MathError> {
        let d = self.out_dim;
        let m = self.config.d_model;
        let y = g.expand_last(y_t, m)?;
        let tok = g.mul(y, p[self.tok.weight])?;
        let tok = g.add(tok, p[self.tok.bias])?;
        let tok = g.add(tok, p[self.tok.column])?;
        let time = g.matmul(t_norm, p[self.tok.time])?;
        let shared = g.add(cond, time)?;
        let shared = g.expand_axis1(shared, d)?;
        g.add(tok, shared)
    }

    /// Pre-norm multi-head self-attention over the `D` tokens of each row, then a feed-forward sublayer.
    fn column_block(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var, phase: &mut Phase) -> Result<Var, MathError> {
        let h = layer_norm(g, p, b.ln1, x)?;
        let q = linear(g, p, b.q, h)?;
        let k = linear(g, p, b.k, h)?;
        let v = linear(g, p, b.v, h)?;
        let a = g.attention(q, k, v, self.config.n_heads)?;
        let a = linear(g, p, b.o, a)?;
        let a = dropout(g, a, self.config.dropout_rate, phase)?;
        let x = g.add(x, a)?;
        let h = layer_norm(g, p, b.ln2, x)?;
        let f = linear(g, p, b.ff1, h)?;
        let f = g.prelu(f, p[b.ff_alpha])?;
        let f = linear(g, p, b.ff2, f)?;
        let f = dropout(g, f, self.config.dropout_rate, phase)?;
        g.add(x, f)
    }

    /// Attention over per-row summaries (mean token); the update is added to every token of the row.
    fn row_block(&self, g: &mut Graph, p: &[Var], b: &Block, x: Var, mode: RowMode) -> Result<Var, MathError> {
        let (rows, d, m) = {
            let s = g.value(x).shape();
            (s[0], s[1], s[2])
        };
        let s = g.sum_axis1(x)?;
        let s = g.scale(s, 1.0 / d as f64)?;
        let h = layer_norm(g, p, b.ln_row, s)?;
        let shape = match mode {
            RowMode::Intersample => vec![1, rows, m],
            RowMode::Degenerate => vec![rows, 1, m],
        };
        let q = linear(g, p, b.rq, h)?;
        let k = linear(g, p, b.rk, h)?;
        let v = linear(g, p, b.rv, h)?;
        let (q, k, v) = (g.reshape(q, shape.clone())?, g.reshape(k, shape.clone())?, g.reshape(v, shape)?);
        let a = g.attention(q, k, v, self.config.n_heads)?;
        let a = g.reshape(a, vec![rows, m])?;
        let a = linear(g, p, b.ro, a)?;
        let a = g.expand_axis1(a, d)?;
        g.add(x, a)
    }

    /// Forward pass with an explicit row-attention mode (no dropout).
    pub fn forward_with_mode(
        &self,
        g: &mut Graph,
        p: &[Var],
        y_t: Var,
        t_norm: Var,
        cond: Var,
        mode: RowMode,
    ) -> Result<Var, MathError> {
        self.forward(g, p, y_t, t_norm, cond, mode, &mut Phase::Eval)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        y_t: Var,
        t_norm: Var,
        cond: Var,
        mode: RowMode,
        phase: &mut Phase,
    ) -> Result<Var, MathError> {
        let mut x = self.tokenize(g, p, y_t, t_norm, cond)?;
        for b in &self.blocks {
            x = self.column_block(g, p, b, x, phase)?;
            x = self.row_block(g, p, b, x, mode)?;
        }
        let h = layer_norm(g, p, self.ln_out, x)?;
        let h = g.mul(h, p[self.head_w])?;
        let out = g.sum_last(h)?;
        g.add(out, p[self.head_b])
    }
}

impl Denoiser for Saint {
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
        linear(g, p, self.tok.cov, cov)
    }

    fn predict(&self, g: &mut Graph, p: &[Var], y_t: Var, t_norm: Var, cond: Var, phase: &mut Phase) -> Result<Var, MathError> {
        // One coin per training step; evaluation never mixes rows.
        let mode = match phase {
            Phase::Train(ctx) => {
                if ctx.rng.gen_bool(self.config.intersample_prob) {
                    RowMode::Intersample
                } else {
                    RowMode::Degenerate
                }
            }
            Phase::Eval => RowMode::Degenerate,
        };
        self.forward(g, p, y_t, t_norm, cond, mode, phase)
    }
}
