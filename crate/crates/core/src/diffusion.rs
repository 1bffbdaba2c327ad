//! Denoising-diffusion engine: noise schedules, one-shot noising, the
//! noise-prediction loss, reverse steps, ancestral sampling and training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndmath::{Graph, MathError, ParamSet, Tensor, Var};

/// Default step count.
pub const DEFAULT_STEPS: usize = 100;
/// Default linear endpoints. The usual `1e-4 -> 0.02` for 1000 steps, rescaled
/// by `1000 / T` so that a 100-step chain still ends near pure noise.
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

/// Rows per forward pass during sampling.
const SAMPLE_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
}

/// Variance-preserving noise schedule with 1-based step index `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub reverse_var: Vec<f64>,
}

impl NoiseSchedule {
    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::Contract(format!("step {t} outside 1..={}", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

/// Linearly spaced `β_t` (inclusive endpoints) with `σ_t² = β_t`.
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, DiffusionError> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::Contract(format!(
            "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { steps, reverse_var: betas.clone(), betas, alphas, alpha_bars })
}

/// `y_t = sqrt(ᾱ_t) y0 + sqrt(1 - ᾱ_t) eps`.
pub fn one_shot_noise(y0: &[f64], t: usize, eps: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    let i = s.check(t)?;
    if y0.len() != eps.len() {
        return Err(DiffusionError::Contract("y0 and eps lengths differ".into()));
    }
    let (a, b) = (s.alpha_bars[i].sqrt(), (1.0 - s.alpha_bars[i]).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
}

/// One forward transition `y_t = sqrt(1 - β_t) y_{t-1} + sqrt(β_t) z`.
pub fn forward_step(y_prev: &[f64], t: usize, z: &[f64], s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    let i = s.check(t)?;
    let (a, b) = (s.alphas[i].sqrt(), s.betas[i].sqrt());
    Ok(y_prev.iter().zip(z).map(|(y, e)| a * y + b * e).collect())
}

/// Reverse mean `μ = (y_t - β_t ε̂ / sqrt(1 - ᾱ_t)) / sqrt(1 - β_t)`.
pub fn mu_theta(y_t: &[f64], eps_hat: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    let i = s.check(t)?;
    let (coef, inv) = (s.betas[i] / (1.0 - s.alpha_bars[i]).sqrt(), 1.0 / s.alphas[i].sqrt());
    Ok(y_t.iter().zip(eps_hat).map(|(y, e)| (y - coef * e) * inv).collect())
}

/// Recovers `ε̂` from `(y_t, μ)`; the inverse of [`mu_theta`].
pub fn eps_from_mu(y_t: &[f64], mu: &[f64], t: usize, s: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    let i = s.check(t)?;
    let coef = (1.0 - s.alpha_bars[i]).sqrt() / s.betas[i];
    let sa = s.alphas[i].sqrt();
    Ok(y_t.iter().zip(mu).map(|(y, m)| (y - sa * m) * coef).collect())
}

/// `y_{t-1} = μ + σ_t z`, with no noise at `t = 1`.
pub fn reverse_update<R: Rng + ?Sized>(
    y_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    let mut mu = mu_theta(y_t, eps_hat, t, s)?;
    if t > 1 {
        let sd = s.reverse_var[t - 1].sqrt();
        mu.iter_mut().for_each(|m| *m += sd * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(mu)
}

/// Training-time context passed to [`Denoiser::predict`].
pub struct TrainCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    /// Batch-norm nodes created during the pass, for running statistics.
    pub norm_nodes: Vec<Var>,
}

pub enum Phase<'a> {
    Train(TrainCtx<'a>),
    /// No dropout, running statistics, no cross-row mixing.
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// A noise-prediction network `ε_θ(y_t, t, c)`.
pub trait Denoiser {
    fn out_dim(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Covariate-only part of the network. `cov` is `[B, C]` (encoded covariates).
    /// Its value is constant along a sampling chain and is computed once.
    fn condition(&self, g: &mut Graph, p: &[Var], cov: Var) -> Result<Var, MathError>;

    /// `ε̂` of shape `[B, D]` from `y_t` `[B, D]`, `t / T` `[B, 1]` and the conditioning output.
    fn predict(&self, g: &mut Graph, p: &[Var], y_t: Var, t_norm: Var, cond: Var, phase: &mut Phase)
        -> Result<Var, MathError>;

    /// Folds the batch statistics of one training pass into running statistics.
    fn observe_batch(&mut self, _g: &Graph, _norm_nodes: &[Var]) {}
}

/// Z-scales age with training moments and maps sex {0,1} to {-1,+1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateEncoder {
    pub age_mean: f64,
    pub age_sd: f64,
}

impl CovariateEncoder {
    pub fn fit(covariates: &Tensor) -> Self {
        let ages = covariates.column(0);
        let n = ages.len().max(1) as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { age_mean: mean, age_sd: sd }
    }

    pub fn encode_row(&self, age: f64, sex: f64) -> [f64; 2] {
        [(age - self.age_mean) / self.age_sd, 2.0 * sex - 1.0]
    }

    pub fn encode(&self, covariates: &Tensor) -> Tensor {
        let n = covariates.outer_len();
        let data = (0..n)
            .flat_map(|i| {
                let r = covariates.row(i);
                self.encode_row(r[0], r[1])
            })
            .collect();
        Tensor::new(vec![n, 2], data).expect("two covariates")
    }
}

/// Builds the noise-prediction loss `mean_b ‖ε_b − ε̂_b‖²` for one batch.
///
/// `t ~ U{1..T}` and `ε ~ N(0, I)` are drawn from the context rng.
pub fn training_loss(
    den: &dyn Denoiser,
    g: &mut Graph,
    p: &[Var],
    y0: &Tensor,
    cov: &Tensor,
    s: &NoiseSchedule,
    ctx: TrainCtx,
) -> Result<(Var, Vec<Var>), DiffusionError> {
    let (b, d) = (y0.outer_len(), y0.last_dim());
    if b == 0 {
        return Err(DiffusionError::Contract("empty training batch".into()));
    }
    let mut yt = Vec::with_capacity(b * d);
    let mut eps = Vec::with_capacity(b * d);
    let mut tn = Vec::with_capacity(b);
    for i in 0..b {
        let t = ctx.rng.gen_range(1..=s.steps);
        let e: Vec<f64> = (0..d).map(|_| ctx.rng.sample(StandardNormal)).collect();
        yt.extend(one_shot_noise(y0.row(i), t, &e, s)?);
        eps.extend(e);
        tn.push(t as f64 / s.steps as f64);
    }
    let yt = g.constant(Tensor::new(vec![b, d], yt)?);
    let tn = g.constant(Tensor::new(vec![b, 1], tn)?);
    let eps = g.constant(Tensor::new(vec![b, d], eps)?);
    let c = g.constant(cov.clone());
    let cond = den.condition(g, p, c)?;
    let mut phase = Phase::Train(ctx);
    let pred = den.predict(g, p, yt, tn, cond, &mut phase)?;
    let norm_nodes = match phase {
        Phase::Train(ctx) => ctx.norm_nodes,
        Phase::Eval => Vec::new(),
    };
    let diff = g.sub(pred, eps)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    Ok((g.scale(total, 1.0 / b as f64)?, norm_nodes))
}

/// One reverse step for a batch, using the denoiser in eval mode.
pub fn reverse_step<R: Rng + ?Sized>(
    den: &dyn Denoiser,
    y_t: &Tensor,
    t: usize,
    cov: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor, DiffusionError> {
    let mut g = Graph::new();
    let p = den.params().bind_frozen(&mut g);
    let c = g.constant(cov.clone());
    let cond = den.condition(&mut g, &p, c)?;
    let eps_hat = predict_eval(den, &mut g, &p, y_t, t, cond, s)?;
    let next = reverse_update(y_t.data(), eps_hat.data(), t, s, rng)?;
    Ok(Tensor::new(y_t.shape().to_vec(), next)?)
}

fn predict_eval(
    den: &dyn Denoiser,
    g: &mut Graph,
    p: &[Var],
    y_t: &Tensor,
    t: usize,
    cond: Var,
    s: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    s.check(t)?;
    let b = y_t.outer_len();
    let y = g.constant(y_t.clone());
    let tn = g.constant(Tensor::filled(&[b, 1], t as f64 / s.steps as f64));
    let out = den.predict(g, p, y, tn, cond, &mut Phase::Eval)?;
    Ok(g.value(out).clone())
}

/// Runs the reverse chain from `y_T ~ N(0, I)` for every row of `cov` (`[M, C]`).
pub fn sample_batch<R: Rng + ?Sized>(
    den: &dyn Denoiser,
    cov: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor, DiffusionError> {
    let m = cov.outer_len();
    let d = den.out_dim();
    let mut out = Vec::with_capacity(m * d);
    let mut g = Graph::new();
    let p = den.params().bind_frozen(&mut g);
    let base = g.len();
    for start in (0..m).step_by(SAMPLE_CHUNK) {
        let rows: Vec<usize> = (start..(start + SAMPLE_CHUNK).min(m)).collect();
        let b = rows.len();
        g.truncate(base);
        let c = g.constant(cov.select_rows(&rows));
        let cond = den.condition(&mut g, &p, c)?;
        let cond = g.constant(g.value(cond).clone());
        let keep = g.len();
        let mut y = Tensor::new(vec![b, d], (0..b * d).map(|_| rng.sample(StandardNormal)).collect())?;
        for t in (1..=s.steps).rev() {
            g.truncate(keep);
            let eps_hat = predict_eval(den, &mut g, &p, &y, t, cond, s)?;
            y = Tensor::new(vec![b, d], reverse_update(y.data(), eps_hat.data(), t, s, rng)?)?;
        }
        out.extend(y.into_data());
    }
    Ok(Tensor::new(vec![m, d], out)?)
}

/// Deterministic rng for one sampling cell: stream `cell` of the master seed.
pub fn cell_rng(seed: u64, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    rng
}

/// `M` draws at a single encoded covariate vector.
pub fn ancestral_sample(
    den: &dyn Denoiser,
    cov: &[f64],
    m: usize,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor, DiffusionError> {
    if m == 0 {
        return Err(DiffusionError::Contract("need at least one sample".into()));
    }
    let covs = Tensor::new(vec![m, cov.len()], cov.iter().copied().cycle().take(m * cov.len()).collect())?;
    sample_batch(den, &covs, s, &mut cell_rng(seed, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Anneal the learning rate to zero along a half cosine over all epochs.
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let ok = self.batch_size > 0
            && self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.clip_norm > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DiffusionError::Contract(format!("invalid training config {self:?}")))
        }
    }
}

/// AdamW moments; persisted so training can resume.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    /// Decoupled weight decay: `θ ← θ − lr (m̂ / (sqrt(v̂) + eps) + wd θ)`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.update_with_lr(params, grads, cfg, cfg.lr)
    }

    pub fn update_with_lr(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig, lr: f64) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps) + cfg.weight_decay * *p;
            *p -= lr * step;
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

/// Resumable training progress.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: AdamState,
    /// Mean loss per completed epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains `den` on scaled IDPs `y0` `[N, D]` with encoded covariates `cov` `[N, C]`.
///
/// Epoch `e` draws from stream `e + 1` of `cfg.seed`, so resuming from a saved
/// [`TrainState`] reproduces an uninterrupted run. `on_epoch` returning false stops after that epoch.
pub fn train(
    den: &mut dyn Denoiser,
    y0: &Tensor,
    cov: &Tensor,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(usize, f64) -> bool,
) -> Result<TrainState, DiffusionError> {
    cfg.validate()?;
    let n = y0.outer_len();
    if n == 0 || cov.outer_len() != n || y0.last_dim() != den.out_dim() {
        return Err(DiffusionError::Contract(format!(
            "training data shapes {:?} / {:?} do not fit a {}-output denoiser",
            y0.shape(),
            cov.shape(),
            den.out_dim()
        )));
    }
    for epoch in state.epochs_done..cfg.epochs {
        let mut rng = cell_rng(cfg.seed, epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = order.chunks(cfg.batch_size).count();
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |detail: String| DiffusionError::Diverged { epoch, step, detail };
            let mut g = Graph::new();
            let p = den.params().bind(&mut g);
            let ctx = TrainCtx { rng: &mut rng, norm_nodes: Vec::new() };
            let (loss, norm_nodes) = match training_loss(&*den, &mut g, &p, &y0.select_rows(idx), &cov.select_rows(idx), s, ctx) {
                Err(DiffusionError::Math(e)) => return Err(diverged(e.to_string())),
                other => other?,
            };
            let lv = g.value(loss).item();
            g.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let mut grads = den.params().gather_grads(&g, &p);
            if grads.iter().any(|v| !v.is_finite()) {
                return Err(diverged(format!("non-finite gradient (loss {lv})")));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            let lr = if cfg.cosine_decay {
                let progress = (epoch * batches + step) as f64 / (cfg.epochs * batches) as f64;
                cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            } else {
                cfg.lr
            };
            state.adam.update_with_lr(den.params_mut().values_mut(), &grads, cfg, lr);
            den.observe_batch(&g, &norm_nodes);
            total += lv;
        }
        let mean = total / batches as f64;
        state.loss_trace.push(mean);
        state.epochs_done = epoch + 1;
        if !on_epoch(epoch, mean) {
            break;
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Predicts ε̂ = w·y_t + c·v elementwise; enough to exercise the engine.
    struct Affine {
        params: ParamSet,
        d: usize,
    }

    impl Affine {
        fn new(d: usize, w: f64) -> Self {
            let mut params = ParamSet::new();
            params.push("w", Tensor::filled(&[d], w));
            params.push("v", Tensor::zeros(&[2, d]));
            Self { params, d }
        }
    }

    impl Denoiser for Affine {
        fn out_dim(&self) -> usize {
            self.d
        }
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn condition(&self, g: &mut Graph, p: &[Var], cov: Var) -> Result<Var, MathError> {
            g.matmul(cov, p[1])
        }
        fn predict(&self, g: &mut Graph, p: &[Var], y: Var, _t: Var, cond: Var, _ph: &mut Phase) -> Result<Var, MathError> {
            let h = g.mul(y, p[0])?;
            g.add(h, cond)
        }
    }

    #[test]
    fn schedule_examples() {
        let s = linear_schedule(1, 0.01, 0.01).unwrap();
        assert_eq!(s.betas, vec![0.01]);
        assert_eq!(s.alpha_bars, vec![0.99]);
        let s = linear_schedule(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-15);
        assert!((s.betas[99] - 0.02).abs() < 1e-15);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(linear_schedule(0, 0.1, 0.2).is_err());
        assert!(linear_schedule(10, 0.2, 0.1).is_err());
        assert!(linear_schedule(10, 0.0, 0.1).is_err());
        assert!(linear_schedule(10, 0.1, 1.0).is_err());
        let d = NoiseSchedule::default();
        assert!(d.alpha_bars[99] < 1e-4);
    }

    #[test]
    fn one_shot_hand_case() {
        // One step with β = 0.75 gives ᾱ = 0.25.
        let s = linear_schedule(1, 0.75, 0.75).unwrap();
        let y = one_shot_noise(&[2.0], 1, &[1.0], &s).unwrap();
        assert!((y[0] - 1.866_025_403_784_438_6).abs() < 1e-12);
        assert!(one_shot_noise(&[2.0], 2, &[1.0], &s).is_err());
        assert!(one_shot_noise(&[2.0], 0, &[1.0], &s).is_err());
    }

    #[test]
    fn reverse_mean_hand_case() {
        let s = linear_schedule(1, 0.19, 0.19).unwrap();
        let mu = mu_theta(&[1.0], &[0.0], 1, &s).unwrap();
        assert!((mu[0] - 1.0 / 0.81f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reverse_update_variance() {
        let s = NoiseSchedule::default();
        let t = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| reverse_update(&[0.3], &[0.1], t, &s, &mut rng).unwrap()[0]).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = s.reverse_var[t - 1];
        assert!((v - target).abs() < 3.0 * target * (2.0 / n as f64).sqrt(), "{v} vs {target}");
        // Final step is noise-free.
        let a = reverse_update(&[0.3], &[0.1], 1, &s, &mut rng).unwrap();
        assert_eq!(a, mu_theta(&[0.3], &[0.1], 1, &s).unwrap());
    }

    #[test]
    fn lr_zero_leaves_params_and_clip_bounds_norm() {
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        let mut p = vec![1.0, -2.0];
        AdamState::default().update(&mut p, &[0.5, 0.5], &cfg);
        assert_eq!(p, vec![1.0, -2.0]);
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.0 + 1e-12);
    }

    #[test]
    fn zero_network_has_loss_near_d() {
        let den = Affine::new(3, 0.0);
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y0 = Tensor::zeros(&[20_000, 3]);
        let cov = Tensor::zeros(&[20_000, 2]);
        let mut g = Graph::new();
        let p = den.params().bind(&mut g);
        let (loss, _) = training_loss(&den, &mut g, &p, &y0, &cov, &s, TrainCtx { rng: &mut rng, norm_nodes: vec![] }).unwrap();
        let l = g.value(loss).item();
        assert!((l - 3.0).abs() < 3.0 * (6.0f64 / 20_000.0).sqrt(), "loss {l}");
    }

    #[test]
    fn zero_network_sampling_matches_closed_form() {
        let den = Affine::new(1, 0.0);
        let s = NoiseSchedule::default();
        // ε̂ = 0: y_{t-1} = y_t / sqrt(α_t) + σ_t z, so the variance follows a scalar recursion.
        let mut var = 1.0;
        for t in (1..=s.steps).rev() {
            var /= s.alphas[t - 1];
            if t > 1 {
                var += s.reverse_var[t - 1];
            }
        }
        let m = 20_000;
        let out = ancestral_sample(&den, &[0.0, 0.0], m, &s, 9).unwrap();
        let mean = out.data().iter().sum::<f64>() / m as f64;
        let v = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        assert!(mean.abs() < 3.0 * (var / m as f64).sqrt());
        assert!((v / var - 1.0).abs() < 3.0 * (2.0 / m as f64).sqrt());
        let again = ancestral_sample(&den, &[0.0, 0.0], m, &s, 9).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn training_resumes_exactly() {
        let s = linear_schedule(10, 0.01, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y0 = Tensor::new(vec![64, 2], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cov = Tensor::new(vec![64, 2], (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 16, lr: 1e-2, ..TrainConfig::default() };

        let mut full = Affine::new(2, 0.1);
        let st_full = train(&mut full, &y0, &cov, &s, &cfg, TrainState::default(), |_, _| true).unwrap();

        let mut part = Affine::new(2, 0.1);
        let st = train(&mut part, &y0, &cov, &s, &cfg, TrainState::default(), |e, _| e + 1 < 2).unwrap();
        assert_eq!(st.epochs_done, 2);
        let st = train(&mut part, &y0, &cov, &s, &cfg, st, |_, _| true).unwrap();
        assert_eq!(full.params.values(), part.params.values());
        assert_eq!(st_full, st);
        assert_eq!(st.loss_trace.len(), 4);
    }

    #[test]
    fn divergence_is_reported() {
        let s = linear_schedule(5, 0.01, 0.3).unwrap();
        let y0 = Tensor::filled(&[8, 1], 1e300);
        let cov = Tensor::zeros(&[8, 2]);
        let mut den = Affine::new(1, 1e10);
        let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let err = train(&mut den, &y0, &cov, &s, &cfg, TrainState::default(), |_, _| true).unwrap_err();
        assert!(matches!(err, DiffusionError::Diverged { epoch: 0, step: 0, .. }), "{err}");
    }

    proptest::proptest! {
        #[test]
        fn reverse_mean_inverts(y in -5.0f64..5.0, e in -5.0f64..5.0, t in 1usize..=100) {
            let s = NoiseSchedule::default();
            let mu = mu_theta(&[y], &[e], t, &s).unwrap();
            let back = eps_from_mu(&[y], &mu, t, &s).unwrap();
            proptest::prop_assert!((back[0] - e).abs() < 1e-10);
        }

        #[test]
        fn alpha_bar_decreasing(steps in 1usize..200, a in 1e-5f64..0.5, w in 0.0f64..0.49) {
            let s = linear_schedule(steps, a, a + w).unwrap();
            proptest::prop_assert!(s.alpha_bars.windows(2).all(|p| p[1] < p[0]));
            proptest::prop_assert!(s.alpha_bars[0] <= 1.0 - s.betas[0]);
        }
    }
}
