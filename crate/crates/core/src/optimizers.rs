//! Training steps: momentum SGD, LPF-SGD, SAM and Entropy-SGD.
//!
//! Every optimizer funnels its search direction through the same heavy-ball
//! update with weight decay:
//!
//! ```text
//! buffer <- momentum * buffer + (direction + weight_decay * params)
//! params <- params - lr * buffer
//! ```
//!
//! Batches are slices of example indices into the objective's dataset.
//! Stochastic draws use sub-streams keyed by `(seed, epoch, step, index)`, so
//! LPF-SGD's split gradients can be evaluated in parallel and still reduce
//! bit-identically.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Examples, Objective, ParamVector};
use crate::error::{Error, Result};
use crate::rng;
use crate::Real;

const LPF_STREAM: u64 = 0x1f5;
const ESGD_STREAM: u64 = 0xe5d;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f64> {
    pub params: ParamVector<T>,
    pub momentum_buffer: Option<ParamVector<T>>,
    pub step: u64,
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: ParamVector<T>, lr: T, momentum: T, weight_decay: T) -> Result<Self> {
        if !(lr > T::zero()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(weight_decay >= T::zero()) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(OptimizerState {
            params,
            momentum_buffer: None,
            step: 0,
            lr,
            momentum,
            weight_decay,
        })
    }
}

/// Randomness coordinates of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: u64,
}

/// One row of the per-step training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub optimizer: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub gamma_t: f64,
    pub wallclock_ns: u64,
    /// SAM only: the ascent was skipped because the gradient vanished.
    pub skipped_ascent: bool,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,optimizer,loss,grad_norm,gamma_t,wallclock_ns";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.optimizer, self.loss, self.grad_norm, self.gamma_t, self.wallclock_ns
        )
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}

/// Heavy-ball update along `direction` with learning rate `lr`.
fn apply_update<T: Real>(
    state: &mut OptimizerState<T>,
    direction: &ParamVector<T>,
    lr: T,
) -> Result<()> {
    if !direction.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite update direction at step {}",
            state.step
        )));
    }
    let mut d = direction.clone();
    if state.weight_decay != T::zero() {
        d.axpy(state.weight_decay, &state.params);
    }
    let buf = match state.momentum_buffer.take() {
        Some(mut b) => {
            b.values_mut()
                .iter_mut()
                .zip(d.values())
                .for_each(|(bv, &dv)| *bv = state.momentum * *bv + dv);
            b
        }
        None => d,
    };
    state.params.axpy(-lr, &buf);
    state.momentum_buffer = Some(buf);
    state.step += 1;
    Ok(())
}

/// Momentum SGD on the mean loss of `batch`.
pub fn msgd_step<T: Real, O: Objective<T>>(
    state: &mut OptimizerState<T>,
    obj: &O,
    batch: &[usize],
) -> Result<StepRecord> {
    let start = Instant::now();
    let (loss, g) = obj.loss_grad(&state.params, Examples::Subset(batch))?;
    let rec_step = state.step;
    apply_update(state, &g, state.lr)?;
    Ok(StepRecord {
        step: rec_step,
        optimizer: "msgd".into(),
        loss: loss.as_f64(),
        grad_norm: g.norm().as_f64(),
        gamma_t: 0.0,
        wallclock_ns: elapsed_ns(start),
        skipped_ascent: false,
    })
}

/// How the per-filter norms in Σ turn into perturbation variances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Variance `gamma * ||filter||`: Σ holds the norms themselves.
    #[default]
    Norm,
    /// Variance `gamma * ||filter||^2`.
    SquaredNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpfConfig {
    pub gamma0: f64,
    pub alpha: f64,
    /// Number of batch splits, one Monte Carlo draw per split.
    pub mc_splits: usize,
    /// Length of the radius schedule in steps.
    pub total_steps: u64,
    pub sigma_mode: SigmaMode,
}

impl LpfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::config("LPF gamma0 and alpha must be non-negative"));
        }
        if self.mc_splits == 0 {
            return Err(Error::config("LPF needs at least one split"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("LPF schedule length must be positive"));
        }
        Ok(())
    }
}

/// Per-parameter filter norms.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaDiag<T = f64> {
    pub per_parameter_scale: Vec<T>,
}

/// Broadcasts each filter's L2 norm onto that filter's parameters.
pub fn filter_sigma<T: Real>(params: &ParamVector<T>) -> Result<SigmaDiag<T>> {
    let mut scale = vec![T::zero(); params.len()];
    for f in params.layout().filters() {
        let n = params.filter_norm(f);
        if n == T::zero() {
            return Err(Error::DegenerateFilter {
                layer: f.layer,
                unit: f.unit,
            });
        }
        for i in f.indices() {
            scale[i] = n;
        }
    }
    Ok(SigmaDiag {
        per_parameter_scale: scale,
    })
}

/// Filter radius at step `t` of `total`: rises from `gamma0` to
/// `(alpha + 1) * gamma0` along a half cosine.
pub fn gamma_schedule<T: Real>(t: u64, total: u64, gamma0: T, alpha: T) -> Result<T> {
    if total == 0 {
        return Err(Error::config("schedule length must be positive"));
    }
    if t > total {
        return Err(Error::config(format!(
            "step {t} outside schedule of length {total}"
        )));
    }
    if t == total {
        return Ok((alpha + T::one()) * gamma0);
    }
    let half = T::lit(0.5);
    let phase = T::lit(std::f64::consts::PI * t as f64 / total as f64);
    Ok(gamma0 * (alpha * half * (T::one() - phase.cos()) + T::one()))
}

/// Splits `batch` into `m` contiguous parts; the first `len % m` parts get one
/// extra example.
pub fn split_batch(batch: &[usize], m: usize) -> Result<Vec<&[usize]>> {
    if m == 0 || m > batch.len() {
        return Err(Error::config(format!(
            "cannot split a batch of {} into {m} parts",
            batch.len()
        )));
    }
    let base = batch.len() / m;
    let extra = batch.len() % m;
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for i in 0..m {
        let len = base + usize::from(i < extra);
        out.push(&batch[start..start + len]);
        start += len;
    }
    Ok(out)
}

/// Per-coordinate standard deviations of the LPF perturbation.
fn perturbation_std<T: Real>(params: &ParamVector<T>, gamma: T, mode: SigmaMode) -> Result<Vec<T>> {
    let sigma = filter_sigma(params)?;
    Ok(sigma
        .per_parameter_scale
        .into_iter()
        .map(|s| match mode {
            SigmaMode::Norm => (gamma * s).sqrt(),
            SigmaMode::SquaredNorm => gamma.sqrt() * s,
        })
        .collect())
}

/// The Gaussian perturbation of split `split` at the current step.
fn lpf_perturbation<T: Real>(std: &[T], ctx: StepContext, step: u64, split: usize) -> Vec<T> {
    let mut s = rng::stream(ctx.seed, &[LPF_STREAM, ctx.epoch, step, split as u64]);
    let z: Vec<T> = rng::standard_normal_vec(&mut s, std.len());
    z.into_iter().zip(std).map(|(z, &sd)| z * sd).collect()
}

/// Monte Carlo gradient of the smoothed loss: the mean of `samples` gradients
/// at `θ + std ⊙ z_i`, draw `i` taken from sub-stream `(seed, i)`.
pub fn smoothed_gradient<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    std: &[T],
    samples: usize,
    seed: u64,
) -> Result<ParamVector<T>> {
    if samples == 0 || std.len() != params.len() {
        return Err(Error::config(
            "smoothed gradient needs samples >= 1 and one std per parameter",
        ));
    }
    let grads: Vec<Result<ParamVector<T>>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut s = rng::stream(seed, &[LPF_STREAM, i as u64]);
            let z: Vec<T> = rng::standard_normal_vec(&mut s, std.len());
            let mut p = params.clone();
            p.values_mut()
                .iter_mut()
                .zip(z.iter().zip(std))
                .for_each(|(v, (&zv, &sd))| *v += zv * sd);
            Ok(obj.loss_grad(&p, Examples::All)?.1)
        })
        .collect();
    let mut mean = params.zeros_like();
    let w = T::one() / T::lit(samples as f64);
    for g in grads {
        mean.axpy(w, &g?);
    }
    Ok(mean)
}

/// One LPF-SGD step: the mean of split gradients, each taken at a Gaussian
/// perturbation of the parameters scaled per filter, drives a momentum update.
pub fn lpf_sgd_step<T: Real, O: Objective<T>>(
    state: &mut OptimizerState<T>,
    obj: &O,
    batch: &[usize],
    cfg: &LpfConfig,
    ctx: StepContext,
) -> Result<StepRecord> {
    let start = Instant::now();
    cfg.validate()?;
    let splits = split_batch(batch, cfg.mc_splits)?;
    let t = state.step.min(cfg.total_steps);
    let gamma = gamma_schedule(t, cfg.total_steps, T::lit(cfg.gamma0), T::lit(cfg.alpha))?;
    // params do not move inside the step, so Σ is computed once
    let std = if gamma > T::zero() {
        Some(perturbation_std(&state.params, gamma, cfg.sigma_mode)?)
    } else {
        None
    };

    let step = state.step;
    let params = &state.params;
    let parts: Vec<Result<(T, ParamVector<T>)>> = splits
        .par_iter()
        .enumerate()
        .map(|(i, split)| {
            let probe = match &std {
                Some(sd) => {
                    let z = lpf_perturbation(sd, ctx, step, i);
                    let mut p = params.clone();
                    p.values_mut()
                        .iter_mut()
                        .zip(&z)
                        .for_each(|(v, &zv)| *v += zv);
                    p
                }
                None => params.clone(),
            };
            obj.loss_grad(&probe, Examples::Subset(split))
        })
        .collect();

    let total = T::lit(batch.len() as f64);
    let mut g = params.zeros_like();
    let mut loss = T::zero();
    for (part, split) in parts.into_iter().zip(&splits) {
        let (l, gi) = part?;
        let w = T::lit(split.len() as f64) / total;
        g.axpy(w, &gi);
        loss += w * l;
    }
    apply_update(state, &g, state.lr)?;
    Ok(StepRecord {
        step,
        optimizer: "lpf_sgd".into(),
        loss: loss.as_f64(),
        grad_norm: g.norm().as_f64(),
        gamma_t: gamma.as_f64(),
        wallclock_ns: elapsed_ns(start),
        skipped_ascent: false,
    })
}

/// Sharpness-aware step: gradient at the point `rho` away along the normalized
/// gradient.
pub fn sam_step<T: Real, O: Objective<T>>(
    state: &mut OptimizerState<T>,
    obj: &O,
    batch: &[usize],
    rho: T,
) -> Result<StepRecord> {
    let start = Instant::now();
    if !(rho > T::zero()) {
        return Err(Error::config("SAM radius must be positive"));
    }
    let ex = Examples::Subset(batch);
    let (loss, g) = obj.loss_grad(&state.params, ex)?;
    let gn = g.norm();
    let (g_final, skipped) = if gn > T::zero() && gn.is_finite() {
        let mut probe = state.params.clone();
        probe.axpy(rho / gn, &g);
        (obj.loss_grad(&probe, ex)?.1, false)
    } else {
        (g, true)
    };
    let step = state.step;
    apply_update(state, &g_final, state.lr)?;
    Ok(StepRecord {
        step,
        optimizer: "sam".into(),
        loss: loss.as_f64(),
        grad_norm: g_final.norm().as_f64(),
        gamma_t: 0.0,
        wallclock_ns: elapsed_ns(start),
        skipped_ascent: skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropySgdConfig {
    /// Langevin iterations per outer step.
    pub inner_steps: usize,
    /// Scoping coefficient.
    pub gamma: f64,
    /// Per-step growth of the scope: `gamma_t = gamma * (1 + scope_growth)^t`.
    pub scope_growth: f64,
    pub eta_inner: f64,
    pub eps_noise: f64,
    pub alpha_avg: f64,
    /// Multiplier on the outer learning rate.
    pub lr_multiplier: f64,
}

impl Default for EntropySgdConfig {
    fn default() -> Self {
        EntropySgdConfig {
            inner_steps: 5,
            gamma: 0.5,
            scope_growth: 1e-4,
            eta_inner: 0.05,
            eps_noise: 1e-4,
            alpha_avg: 0.75,
            lr_multiplier: 1.0,
        }
    }
}

impl EntropySgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(Error::config("Entropy-SGD needs at least one inner step"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config(
                "Entropy-SGD scope gamma must be positive (gamma = 0 gives a zero update)",
            ));
        }
        if !(self.scope_growth >= 0.0) || !(self.eta_inner > 0.0) || !(self.eps_noise >= 0.0) {
            return Err(Error::config(
                "Entropy-SGD growth, step size and noise must be non-negative",
            ));
        }
        if !(self.alpha_avg > 0.0 && self.alpha_avg <= 1.0) {
            return Err(Error::config(
                "Entropy-SGD averaging weight must lie in (0, 1]",
            ));
        }
        if !(self.lr_multiplier > 0.0) {
            return Err(Error::config(
                "Entropy-SGD learning-rate multiplier must be positive",
            ));
        }
        Ok(())
    }
}

/// Step sizes of the Langevin averaging loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Langevin<T> {
    pub steps: usize,
    pub gamma: T,
    pub eta: T,
    pub eps: T,
    pub alpha: T,
}

/// Langevin averaging loop shared by Entropy-SGD and the local-entropy
/// measure: SGLD on `L(x) + gamma/2 ||anchor - x||^2` started at the anchor,
/// returning the exponential average of the iterates.
///
/// Inner step `k` evaluates `examples(k)` and draws its noise from `noise(k)`.
pub(crate) fn langevin_average<'b, T: Real, O: Objective<T>>(
    obj: &O,
    anchor: &ParamVector<T>,
    p: Langevin<T>,
    examples: impl Fn(usize) -> Examples<'b>,
    noise: impl Fn(usize) -> rng::Stream,
) -> Result<ParamVector<T>> {
    let mut inner = anchor.clone();
    let mut mu = anchor.clone();
    let noise_scale = p.eta.sqrt() * p.eps;
    for k in 0..p.steps {
        let (_, mut g) = obj.loss_grad(&inner, examples(k))?;
        for ((gv, &a), &x) in g
            .values_mut()
            .iter_mut()
            .zip(anchor.values())
            .zip(inner.values())
        {
            *gv -= p.gamma * (a - x);
        }
        inner.axpy(-p.eta, &g);
        if noise_scale != T::zero() {
            let z: Vec<T> = rng::standard_normal_vec(&mut noise(k), inner.len());
            inner
                .values_mut()
                .iter_mut()
                .zip(z)
                .for_each(|(v, zv)| *v += noise_scale * zv);
        }
        if !inner.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite Langevin iterate at inner step {k}"
            )));
        }
        for (m, &x) in mu.values_mut().iter_mut().zip(inner.values()) {
            *m = (T::one() - p.alpha) * *m + p.alpha * x;
        }
    }
    Ok(mu)
}

/// Entropy-SGD outer step. Inner iteration `k` uses `batches[k % batches.len()]`.
pub fn entropy_sgd_step<T: Real, O: Objective<T>>(
    state: &mut OptimizerState<T>,
    obj: &O,
    batches: &[&[usize]],
    cfg: &EntropySgdConfig,
    ctx: StepContext,
) -> Result<StepRecord> {
    let start = Instant::now();
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::config("Entropy-SGD needs at least one batch"));
    }
    let step = state.step;
    let gamma = T::lit(cfg.gamma * (1.0 + cfg.scope_growth).powf(step as f64));
    let loss = obj.loss(&state.params, Examples::Subset(batches[0]))?;
    let langevin = Langevin {
        steps: cfg.inner_steps,
        gamma,
        eta: T::lit(cfg.eta_inner),
        eps: T::lit(cfg.eps_noise),
        alpha: T::lit(cfg.alpha_avg),
    };
    let mu = langevin_average(
        obj,
        &state.params,
        langevin,
        |k| Examples::Subset(batches[k % batches.len()]),
        |k| rng::stream(ctx.seed, &[ESGD_STREAM, ctx.epoch, step, k as u64]),
    )?;

    let mut direction = state.params.sub(&mu)?;
    direction.values_mut().iter_mut().for_each(|v| *v *= gamma);
    let lr = state.lr * T::lit(cfg.lr_multiplier);
    apply_update(state, &direction, lr)?;
    Ok(StepRecord {
        step,
        optimizer: "entropy_sgd".into(),
        loss: loss.as_f64(),
        grad_norm: direction.norm().as_f64(),
        gamma_t: gamma.as_f64(),
        wallclock_ns: elapsed_ns(start),
        skipped_ascent: false,
    })
}

/// Optimizer choice with its specific hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerSpec {
    Msgd,
    LpfSgd(LpfConfig),
    Sam { rho: f64 },
    EntropySgd(EntropySgdConfig),
}

impl OptimizerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerSpec::Msgd => "msgd",
            OptimizerSpec::LpfSgd(_) => "lpf_sgd",
            OptimizerSpec::Sam { .. } => "sam",
            OptimizerSpec::EntropySgd(_) => "entropy_sgd",
        }
    }

    /// Mini-batches consumed by one step.
    pub fn batches_per_step(&self) -> usize {
        match self {
            OptimizerSpec::EntropySgd(c) => c.inner_steps.max(1),
            _ => 1,
        }
    }

    /// Runs one step. Single-batch optimizers use `batches[0]`.
    pub fn step<T: Real, O: Objective<T>>(
        &self,
        state: &mut OptimizerState<T>,
        obj: &O,
        batches: &[&[usize]],
        ctx: StepContext,
    ) -> Result<StepRecord> {
        let first = *batches
            .first()
            .ok_or_else(|| Error::config("no batch supplied"))?;
        match self {
            OptimizerSpec::Msgd => msgd_step(state, obj, first),
            OptimizerSpec::LpfSgd(cfg) => lpf_sgd_step(state, obj, first, cfg, ctx),
            OptimizerSpec::Sam { rho } => sam_step(state, obj, first, T::lit(*rho)),
            OptimizerSpec::EntropySgd(cfg) => entropy_sgd_step(state, obj, batches, cfg, ctx),
        }
    }
}
