//! Sharpness measures evaluated at a trained parameter vector.
//!
//! Every measure is defined on the full training loss of an [`Objective`], so
//! the same code runs on networks and on synthetic quadratics. Monte Carlo
//! loops draw sample `i` from the sub-stream `(seed, measure tag, i)` and are
//! reduced in index order, so results do not depend on the thread count.
//!
//! The measures assume a balanced network (see [`crate::models::balance`]).

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Batch, Examples, Objective, ParamVector};
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::Model;
use crate::optimizers::{langevin_average, Langevin};
use crate::rng;
use crate::Real;

const LPF_TAG: u64 = 0x5f1;
const PAC_TAG: u64 = 0x9ac;
const FROB_TAG: u64 = 0xf40b;
const LANCZOS_TAG: u64 = 0x1a2c;
const LOCAL_ENTROPY_TAG: u64 = 0x1e;

pub const DEFAULT_SIGMA: f64 = 0.01;
pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_PSI: f64 = 1e-3;
pub const DEFAULT_DELTA: f64 = 0.05;
pub const PAC_BAYES_TARGET: f64 = 0.1;
/// Search interval of the bisections, for both the ε-sharpness step and the
/// PAC-Bayes noise scale.
pub const SEARCH_BOUNDS: (f64, f64) = (1e-12, 1e3);
const MIN_DIRECTION_NORM: f64 = 1e-12;
const LANCZOS_BREAKDOWN: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureName {
    Lpf,
    EpsSharpness,
    PacBayes,
    Frn,
    HessFrobenius,
    LambdaMax,
    Trace,
    DEff,
    ShannonEntropy,
    LocalEntropyGrad,
}

impl MeasureName {
    pub const ALL: [MeasureName; 10] = [
        MeasureName::Lpf,
        MeasureName::EpsSharpness,
        MeasureName::PacBayes,
        MeasureName::Frn,
        MeasureName::HessFrobenius,
        MeasureName::LambdaMax,
        MeasureName::Trace,
        MeasureName::DEff,
        MeasureName::ShannonEntropy,
        MeasureName::LocalEntropyGrad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MeasureName::Lpf => "lpf",
            MeasureName::EpsSharpness => "eps_sharpness",
            MeasureName::PacBayes => "pac_bayes",
            MeasureName::Frn => "frn",
            MeasureName::HessFrobenius => "hess_frobenius",
            MeasureName::LambdaMax => "lambda_max",
            MeasureName::Trace => "trace",
            MeasureName::DEff => "d_eff",
            MeasureName::ShannonEntropy => "shannon_entropy",
            MeasureName::LocalEntropyGrad => "local_entropy_grad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown measure `{s}`")))
    }
}

impl std::fmt::Display for MeasureName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A measure value with the knobs that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub name: MeasureName,
    pub value: f64,
    pub config: BTreeMap<String, f64>,
    pub dataset_id: String,
}

impl MeasureReport {
    pub const CSV_HEADER: &'static str = "run_id,measure,value,sigma,M,epsilon,psi,seed";

    pub fn csv_row(&self, run_id: &str) -> String {
        let field = |k: &str| {
            self.config
                .get(k)
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            run_id,
            self.name,
            self.value,
            field("sigma"),
            field("M"),
            field("epsilon"),
            field("psi"),
            field("seed")
        )
    }
}

fn perturbed<T: Real>(params: &ParamVector<T>, scale: T, z: &[T]) -> ParamVector<T> {
    let mut p = params.clone();
    p.values_mut()
        .iter_mut()
        .zip(z)
        .for_each(|(v, &zv)| *v += scale * zv);
    p
}

fn sample_noise<T: Real>(seed: u64, tag: u64, i: usize, n: usize) -> Vec<T> {
    rng::standard_normal_vec(&mut rng::stream(seed, &[tag, i as u64]), n)
}

/// Ordered sum of per-sample results, reporting the first failing index.
fn ordered_mean<T: Real>(parts: Vec<Result<T>>, what: &str) -> Result<T> {
    let m = parts.len();
    let mut acc = T::zero();
    for (i, p) in parts.into_iter().enumerate() {
        let v = p.map_err(|e| Error::Numeric(format!("{what} sample {i}: {e}")))?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{what} sample {i} is not finite")));
        }
        acc += v;
    }
    Ok(acc / T::lit(m as f64))
}

/// Gaussian-smoothed loss: the mean full-data loss at `θ + τ`, `τ ~ N(0, σ²I)`,
/// over `m` samples.
pub fn lpf_measure<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    sigma: f64,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if !(sigma > 0.0) || m == 0 {
        return Err(Error::config(
            "LPF measure needs sigma > 0 and at least one sample",
        ));
    }
    let s = T::lit(sigma);
    let parts: Vec<Result<T>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let z = sample_noise(seed, LPF_TAG, i, params.len());
            obj.loss(&perturbed(params, s, &z), Examples::All)
        })
        .collect();
    Ok(ordered_mean(parts, "LPF")?.as_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSharpness {
    /// `1 / ‖θ - θ*‖` at the located point.
    pub value: f64,
    /// Step along the (unnormalized) gradient.
    pub eta: f64,
    /// Displacement norm `η ‖∇L‖`.
    pub displacement: f64,
    /// Loss increase at the located point, from a final independent evaluation.
    pub deviation: f64,
}

/// Scans `SEARCH_BOUNDS` upward by factors of ten for `lo < hi` with
/// `f(lo) < target < f(hi)`. Returns the point directly if a probe already
/// lands within `psi`. Failures of `f` count as overshooting.
fn bracket(
    f: &impl Fn(f64) -> Result<f64>,
    target: f64,
    psi: f64,
) -> Result<(f64, f64, Option<f64>)> {
    let (low, high) = SEARCH_BOUNDS;
    let eval = |x: f64| match f(x) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    };
    let d_low = eval(low);
    if (d_low - target).abs() <= psi {
        return Ok((low, low, Some(low)));
    }
    if d_low > target {
        return Err(Error::NonBracketable {
            target,
            low: d_low,
            high: f64::NAN,
        });
    }
    let mut lo = low;
    let mut x = low;
    loop {
        let next = (x * 10.0).min(high);
        let d = eval(next);
        if (d - target).abs() <= psi {
            return Ok((next, next, Some(next)));
        }
        if d > target {
            return Ok((lo, next, None));
        }
        if next >= high {
            return Err(Error::NonBracketable {
                target,
                low: d_low,
                high: d,
            });
        }
        lo = next;
        x = next;
    }
}

/// Bisection of `f(x) = target` to within `psi`, in log space while the
/// bracket spans more than a decade.
fn bisect(f: &impl Fn(f64) -> Result<f64>, target: f64, psi: f64) -> Result<f64> {
    let (mut lo, mut hi, hit) = bracket(f, target, psi)?;
    if let Some(x) = hit {
        return Ok(x);
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = if hi / lo > 10.0 {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        let d = match f(mid) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        };
        if (d - target).abs() <= psi {
            return Ok(mid);
        }
        if d > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Err(Error::Numeric(format!(
        "bisection for deviation {target} did not reach tolerance {psi}"
    )))
}

/// ε-sharpness: the inverse of the displacement along the full-data gradient
/// that raises the loss by `epsilon`, located to within `psi`.
pub fn eps_sharpness<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    epsilon: f64,
    psi: f64,
) -> Result<EpsSharpness> {
    if !(epsilon > 0.0) || !(psi > 0.0) || psi >= epsilon {
        return Err(Error::config("ε-sharpness needs 0 < psi < epsilon"));
    }
    let (l0, g) = obj.loss_grad(params, Examples::All)?;
    let gn = g.norm().as_f64();
    if !(gn >= MIN_DIRECTION_NORM) {
        return Err(Error::UndefinedDirection { norm: gn });
    }
    let l0 = l0.as_f64();
    let deviation = |eta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.axpy(T::lit(eta), &g);
        Ok(obj.loss(&p, Examples::All)?.as_f64() - l0)
    };
    let eta = bisect(&deviation, epsilon, psi)?;
    let mut p = params.clone();
    p.axpy(T::lit(eta), &g);
    let check = obj.loss(&p, Examples::All)?.as_f64() - obj.loss(params, Examples::All)?.as_f64();
    if !((check - epsilon).abs() <= psi) {
        return Err(Error::Numeric(format!(
            "ε-sharpness verification failed: deviation {check} for target {epsilon}"
        )));
    }
    let displacement = p.sub(params)?.norm().as_f64();
    Ok(EpsSharpness {
        value: 1.0 / displacement,
        eta,
        displacement,
        deviation: check,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacBayes {
    pub value: f64,
    /// Noise scale whose expected loss increase hit the target.
    pub sigma: f64,
    /// Re-evaluated expected loss increase at `sigma`.
    pub deviation: f64,
}

/// Monte Carlo estimate of `E[L(θ + σ z)] - L(θ)` over `m` fixed draws `z`.
pub fn expected_deviation<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    sigma: f64,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let base = obj.loss(params, Examples::All)?.as_f64();
    let s = T::lit(sigma);
    let parts: Vec<Result<T>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let z = sample_noise(seed, PAC_TAG, i, params.len());
            obj.loss(&perturbed(params, s, &z), Examples::All)
        })
        .collect();
    Ok(ordered_mean(parts, "PAC-Bayes")?.as_f64() - base)
}

/// PAC-Bayes measure `‖θ* - θ0‖² / (4σ²) + ln(m/δ) / 2`, with σ found by
/// bisection so that the expected loss increase under `N(0, σ²I)` noise is
/// `target` within `psi`. The same `m_samples` draws are reused at every σ.
#[allow(clippy::too_many_arguments)]
pub fn pac_bayes_measure<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    init: &ParamVector<T>,
    m_samples: usize,
    psi: f64,
    delta: f64,
    target: f64,
    seed: u64,
) -> Result<PacBayes> {
    let m = obj.num_examples();
    if m < 2 {
        return Err(Error::config(
            "PAC-Bayes measure needs at least two examples",
        ));
    }
    if m_samples == 0 || !(psi > 0.0) || !(delta > 0.0 && delta < 1.0) || !(target > psi) {
        return Err(Error::config(
            "PAC-Bayes needs samples >= 1, psi > 0, 0 < delta < 1 and target > psi",
        ));
    }
    let dist2 = init.sub(params)?.norm().as_f64().powi(2);
    let sigma = bisect(
        &|s| expected_deviation(obj, params, s, m_samples, seed),
        target,
        psi,
    )?;
    let deviation = expected_deviation(obj, params, sigma, m_samples, seed)?;
    if !((deviation - target).abs() <= psi) {
        return Err(Error::Numeric(format!(
            "PAC-Bayes verification failed: deviation {deviation} for target {target}"
        )));
    }
    let value = dist2 / (4.0 * sigma * sigma) + 0.5 * (m as f64 / delta).ln();
    Ok(PacBayes {
        value,
        sigma,
        deviation,
    })
}

/// Fisher-Rao norm proxy `θᵀ H θ`.
pub fn fisher_rao_norm<T: Real, O: Objective<T>>(obj: &O, params: &ParamVector<T>) -> Result<f64> {
    let hv = obj.hvp(params, params, Examples::All)?;
    Ok(params.dot(&hv).as_f64())
}

/// Hutchinson estimate of `‖H‖_F`: root mean of `‖H v‖²` over `m` Gaussian
/// probes.
pub fn hessian_frobenius<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::config("Frobenius estimate needs at least one probe"));
    }
    let parts: Vec<Result<T>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let v = params.with_values(sample_noise(seed, FROB_TAG, i, params.len()));
            let hv = obj.hvp(params, &v, Examples::All)?;
            Ok(hv.dot(&hv))
        })
        .collect();
    Ok(ordered_mean(parts, "Frobenius")?.as_f64().sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    /// Ritz values, descending.
    pub ritz_values: Vec<f64>,
    /// Gauss quadrature weights, summing to one.
    pub weights: Vec<f64>,
    /// Number of Lanczos steps actually taken.
    pub k: usize,
    /// Lanczos stopped early on an invariant subspace.
    pub breakdown: bool,
}

/// `k`-step Lanczos on the Hessian with full reorthogonalization, started from
/// a seeded random unit vector with entries `±1/√n`.
pub fn lanczos_spectrum<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    k: usize,
    seed: u64,
) -> Result<SpectrumEstimate> {
    let n = params.len();
    if k == 0 || k > n {
        return Err(Error::config(format!(
            "Lanczos steps must lie in [1, {n}], got {k}"
        )));
    }
    // Rademacher start: d·vᵀHv is then the Hutchinson estimator without the
    // diagonal variance term
    let mut s = rng::stream(seed, &[LANCZOS_TAG]);
    let scale = 1.0 / (n as f64).sqrt();
    let mut v: Vec<f64> = (0..n)
        .map(|_| if s.random::<bool>() { scale } else { -scale })
        .collect();

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut alpha = Vec::with_capacity(k);
    let mut beta: Vec<f64> = Vec::with_capacity(k);
    let mut breakdown = false;
    for j in 0..k {
        let hv = obj.hvp(
            params,
            &params.with_values(v.iter().map(|&x| T::lit(x)).collect()),
            Examples::All,
        )?;
        let mut w: Vec<f64> = hv.values().iter().map(|x| x.as_f64()).collect();
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite Hessian-vector product at Lanczos step {j}"
            )));
        }
        let a = linalg::dot(&w, &v);
        alpha.push(a);
        basis.push(v);
        for _ in 0..2 {
            for q in &basis {
                let c = linalg::dot(q, &w);
                linalg::axpy(-c, q, &mut w);
            }
        }
        if j + 1 == k {
            break;
        }
        let b = linalg::norm(&w);
        if b < LANCZOS_BREAKDOWN {
            breakdown = true;
            break;
        }
        beta.push(b);
        v = w.into_iter().map(|x| x / b).collect();
    }
    let (ritz_values, weights) = linalg::tridiagonal_eigen(&alpha, &beta)?;
    Ok(SpectrumEstimate {
        k: ritz_values.len(),
        ritz_values,
        weights,
        breakdown,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeasures {
    pub lambda_max: f64,
    pub trace: f64,
    pub d_eff: f64,
}

/// Top Ritz value, and trace and effective dimensionality by Lanczos
/// quadrature: `dim Σ w_i g(λ_i)` with `g(λ) = λ` and `λ / (1 + λ)`.
pub fn spectrum_measures(spec: &SpectrumEstimate, dim: usize) -> Result<SpectrumMeasures> {
    if spec.ritz_values.is_empty() || spec.ritz_values.len() != spec.weights.len() {
        return Err(Error::config("spectrum estimate is empty or inconsistent"));
    }
    let d = dim as f64;
    let pairs = spec.ritz_values.iter().zip(&spec.weights);
    Ok(SpectrumMeasures {
        lambda_max: spec.ritz_values[0],
        trace: d * pairs.clone().map(|(l, w)| w * l).sum::<f64>(),
        d_eff: d * pairs.map(|(l, w)| w * l / (1.0 + l)).sum::<f64>(),
    })
}

/// Spectrum measures over `probes` independent start vectors: the largest
/// top Ritz value, and the mean trace and effective dimensionality.
pub fn averaged_spectrum_measures<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    k: usize,
    probes: usize,
    seed: u64,
) -> Result<SpectrumMeasures> {
    if probes == 0 {
        return Err(Error::config("need at least one Lanczos probe"));
    }
    let runs: Vec<Result<SpectrumMeasures>> = (0..probes)
        .into_par_iter()
        .map(|p| {
            let spec = lanczos_spectrum(obj, params, k, rng::derive_seed(seed, &[p as u64]))?;
            spectrum_measures(&spec, params.len())
        })
        .collect();
    let mut out = SpectrumMeasures {
        lambda_max: f64::NEG_INFINITY,
        trace: 0.0,
        d_eff: 0.0,
    };
    for r in runs {
        let r = r?;
        out.lambda_max = out.lambda_max.max(r.lambda_max);
        out.trace += r.trace / probes as f64;
        out.d_eff += r.d_eff / probes as f64;
    }
    Ok(out)
}

/// Mean prediction entropy `-(1/m) Σ_i Σ_j p_ij ln p_ij`, with `0 ln 0 = 0`.
pub fn shannon_entropy<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    data: &Batch<T>,
) -> Result<f64> {
    let probs = autodiff::probabilities(model, params, data.inputs())?;
    Ok(mean_entropy(
        probs.as_slice().iter().map(|p| p.as_f64()),
        probs.rows(),
    ))
}

fn mean_entropy(p: impl Iterator<Item = f64>, rows: usize) -> f64 {
    let total: f64 = p.filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum();
    total / rows as f64
}

/// Knobs of the local-entropy measure. The scope `gamma` has no default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalEntropyConfig {
    pub steps: usize,
    pub gamma: f64,
    pub eta: f64,
    pub eps: f64,
    pub alpha_avg: f64,
}

/// Local-entropy gradient norm `‖γ(θ* - μ)‖`, with `μ` the Langevin average of
/// the inner SGLD chain run on the full training loss.
pub fn local_entropy_grad_norm<T: Real, O: Objective<T>>(
    obj: &O,
    params: &ParamVector<T>,
    cfg: &LocalEntropyConfig,
    seed: u64,
) -> Result<f64> {
    if cfg.steps == 0 || !(cfg.gamma > 0.0) || !(cfg.eta > 0.0) || !(cfg.eps >= 0.0) {
        return Err(Error::config(
            "local entropy needs steps >= 1, gamma > 0, eta > 0, eps >= 0",
        ));
    }
    if !(cfg.alpha_avg > 0.0 && cfg.alpha_avg <= 1.0) {
        return Err(Error::config(
            "local entropy averaging weight must lie in (0, 1]",
        ));
    }
    let p = Langevin {
        steps: cfg.steps,
        gamma: T::lit(cfg.gamma),
        eta: T::lit(cfg.eta),
        eps: T::lit(cfg.eps),
        alpha: T::lit(cfg.alpha_avg),
    };
    let mu = langevin_average(
        obj,
        params,
        p,
        |_| Examples::All,
        |k| rng::stream(seed, &[LOCAL_ENTROPY_TAG, k as u64]),
    )?;
    Ok(cfg.gamma * params.sub(&mu)?.norm().as_f64())
}

/// Settings for computing a list of measures on one trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub measures: Vec<MeasureName>,
    pub sigma: f64,
    pub lpf_samples: usize,
    pub epsilon: f64,
    pub psi: f64,
    pub delta: f64,
    pub pac_samples: usize,
    pub frobenius_samples: usize,
    /// Lanczos steps, capped at the parameter count.
    pub lanczos_steps: usize,
    pub lanczos_probes: usize,
    pub local_entropy: Option<LocalEntropyConfig>,
    pub seed: u64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            measures: vec![MeasureName::Lpf],
            sigma: DEFAULT_SIGMA,
            lpf_samples: 100,
            epsilon: DEFAULT_EPSILON,
            psi: DEFAULT_PSI,
            delta: DEFAULT_DELTA,
            pac_samples: 100,
            frobenius_samples: 100,
            lanczos_steps: 100,
            lanczos_probes: 10,
            local_entropy: None,
            seed: 0,
        }
    }
}

/// Evaluates each configured measure on a network bound to its training data.
pub fn compute_measures<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    init: &ParamVector<T>,
    data: &Batch<T>,
    cfg: &MeasureConfig,
    dataset_id: &str,
) -> Result<Vec<MeasureReport>> {
    let obj = autodiff::MlpObjective::new(model, data);
    let seed = cfg.seed as f64;
    let mut spectrum: Option<SpectrumMeasures> = None;
    let k = cfg.lanczos_steps.min(params.len());
    let mut out = Vec::with_capacity(cfg.measures.len());
    for &name in &cfg.measures {
        let mut conf = BTreeMap::new();
        let value = match name {
            MeasureName::Lpf => {
                conf.extend([
                    ("sigma".to_string(), cfg.sigma),
                    ("M".into(), cfg.lpf_samples as f64),
                    ("seed".into(), seed),
                ]);
                lpf_measure(&obj, params, cfg.sigma, cfg.lpf_samples, cfg.seed)?
            }
            MeasureName::EpsSharpness => {
                let r = eps_sharpness(&obj, params, cfg.epsilon, cfg.psi)?;
                conf.extend([
                    ("epsilon".to_string(), cfg.epsilon),
                    ("psi".into(), cfg.psi),
                    ("eta".into(), r.eta),
                ]);
                r.value
            }
            MeasureName::PacBayes => {
                let r = pac_bayes_measure(
                    &obj,
                    params,
                    init,
                    cfg.pac_samples,
                    cfg.psi,
                    cfg.delta,
                    PAC_BAYES_TARGET,
                    cfg.seed,
                )?;
                conf.extend([
                    ("sigma".to_string(), r.sigma),
                    ("M".into(), cfg.pac_samples as f64),
                    ("psi".into(), cfg.psi),
                    ("delta".into(), cfg.delta),
                    ("seed".into(), seed),
                ]);
                r.value
            }
            MeasureName::Frn => fisher_rao_norm(&obj, params)?,
            MeasureName::HessFrobenius => {
                conf.extend([
                    ("M".to_string(), cfg.frobenius_samples as f64),
                    ("seed".into(), seed),
                ]);
                hessian_frobenius(&obj, params, cfg.frobenius_samples, cfg.seed)?
            }
            MeasureName::LambdaMax | MeasureName::Trace | MeasureName::DEff => {
                let s = match spectrum {
                    Some(s) => s,
                    None => *spectrum.insert(averaged_spectrum_measures(
                        &obj,
                        params,
                        k,
                        cfg.lanczos_probes,
                        cfg.seed,
                    )?),
                };
                conf.extend([
                    ("k".to_string(), k as f64),
                    ("M".into(), cfg.lanczos_probes as f64),
                    ("seed".into(), seed),
                ]);
                match name {
                    MeasureName::LambdaMax => s.lambda_max,
                    MeasureName::Trace => s.trace,
                    _ => s.d_eff,
                }
            }
            MeasureName::ShannonEntropy => shannon_entropy(model, params, data)?,
            MeasureName::LocalEntropyGrad => {
                let le = cfg.local_entropy.ok_or_else(|| {
                    Error::config("local_entropy_grad needs an explicit scope gamma")
                })?;
                conf.extend([
                    ("L".to_string(), le.steps as f64),
                    ("gamma".into(), le.gamma),
                    ("eta".into(), le.eta),
                    ("eps".into(), le.eps),
                    ("alpha_avg".into(), le.alpha_avg),
                    ("seed".into(), seed),
                ]);
                local_entropy_grad_norm(&obj, params, &le, cfg.seed)?
            }
        };
        if !value.is_finite() {
            return Err(Error::Numeric(format!("measure {name} is not finite")));
        }
        out.push(MeasureReport {
            name,
            value,
            config: conf,
            dataset_id: dataset_id.to_string(),
        });
    }
    Ok(out)
}
