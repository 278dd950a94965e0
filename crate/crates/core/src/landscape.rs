//! Synthetic quadratic landscapes `f(θ) = θᵀHθ / 2` with a controlled
//! spectrum, and the exact values every curvature measure takes at the
//! minimizer `θ* = 0`.
//!
//! `H = Q diag(λ) Qᵀ` with `Q` a seeded random orthogonal basis. The landscape
//! implements [`Objective`], so the sharpness estimators run on it unchanged.
//! It has no examples in the data sense: example subsets are accepted and
//! ignored.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Examples, Layout, Objective, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;
use crate::sharpness;
use crate::Real;

/// Interval of the injected flat eigenvalues.
pub const FLAT_RANGE: (f64, f64) = (1e-5, 1e-3);
/// Law of the non-injected eigenvalues in the flat-fraction family.
pub const BASELINE_RANGE: (f64, f64) = (1.0, 10.0);

#[derive(Debug, Clone)]
pub struct QuadraticLandscape<T = f64> {
    eigenvalues: Vec<f64>,
    basis_seed: Option<u64>,
    h: Matrix<T>,
    layout: Arc<Layout>,
    num_examples: usize,
}

impl<T: Real> QuadraticLandscape<T> {
    /// Landscape with Hessian `Q diag(eigenvalues) Qᵀ`, `Q` drawn from
    /// `basis_seed`.
    pub fn new(eigenvalues: Vec<f64>, basis_seed: u64) -> Result<Self> {
        validate_eigenvalues(&eigenvalues)?;
        let d = eigenvalues.len();
        let q: Matrix<f64> = linalg::random_orthogonal(d, basis_seed);
        let mut h = Matrix::<f64>::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v: f64 = (0..d).map(|k| q[(i, k)] * eigenvalues[k] * q[(j, k)]).sum();
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
        Ok(Self::from_parts(
            eigenvalues,
            Some(basis_seed),
            h.map(T::lit),
        ))
    }

    /// Axis-aligned landscape, `H = diag(eigenvalues)`.
    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        validate_eigenvalues(&eigenvalues)?;
        let d = eigenvalues.len();
        let mut h = Matrix::zeros(d, d);
        for (i, &l) in eigenvalues.iter().enumerate() {
            h[(i, i)] = T::lit(l);
        }
        Ok(Self::from_parts(eigenvalues, None, h))
    }

    fn from_parts(eigenvalues: Vec<f64>, basis_seed: Option<u64>, h: Matrix<T>) -> Self {
        let layout = Arc::new(Layout::flat(eigenvalues.len()));
        QuadraticLandscape {
            eigenvalues,
            basis_seed,
            h,
            layout,
            num_examples: 1,
        }
    }

    /// Reports `n` examples to callers that split batches (LPF-SGD, PAC-Bayes
    /// `m`). Every subset still evaluates the same quadratic.
    pub fn with_examples(mut self, n: usize) -> Self {
        self.num_examples = n.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis_seed(&self) -> Option<u64> {
        self.basis_seed
    }

    pub fn hessian(&self) -> &Matrix<T> {
        &self.h
    }

    /// The minimizer, `θ* = 0`.
    pub fn minimizer(&self) -> ParamVector<T> {
        ParamVector::zeros(self.layout.clone())
    }

    /// Landscape with every eigenvalue multiplied by `c` and the same basis.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let eig = self.eigenvalues.iter().map(|&l| l * c).collect::<Vec<_>>();
        validate_eigenvalues(&eig)?;
        let h = self.h.map(|v| v * T::lit(c));
        Ok(QuadraticLandscape {
            eigenvalues: eig,
            h,
            ..self.clone()
        })
    }

    /// `θᵀHθ`, the Fisher-Rao norm of the quadratic.
    pub fn frn(&self, theta: &[T]) -> T {
        linalg::dot(theta, &self.h.matvec(theta))
    }

    fn check(&self, params: &ParamVector<T>) -> Result<()> {
        if params.len() != self.dim() {
            return Err(Error::arch(format!(
                "landscape has dimension {}, got {} parameters",
                self.dim(),
                params.len()
            )));
        }
        Ok(())
    }
}

fn validate_eigenvalues(eig: &[f64]) -> Result<()> {
    if eig.is_empty() {
        return Err(Error::config("landscape needs at least one eigenvalue"));
    }
    if let Some(l) = eig.iter().find(|l| !(**l >= 0.0) || !l.is_finite()) {
        return Err(Error::config(format!(
            "eigenvalue {l} is not a finite non-negative number"
        )));
    }
    Ok(())
}

impl<T: Real> Objective<T> for QuadraticLandscape<T> {
    fn layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    fn num_examples(&self) -> usize {
        self.num_examples
    }

    fn loss(&self, params: &ParamVector<T>, _: Examples<'_>) -> Result<T> {
        self.check(params)?;
        let v = self.frn(params.values()) * T::lit(0.5);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite quadratic loss".into()));
        }
        Ok(v)
    }

    fn loss_grad(&self, params: &ParamVector<T>, _: Examples<'_>) -> Result<(T, ParamVector<T>)> {
        self.check(params)?;
        let g = self.h.matvec(params.values());
        let loss = linalg::dot(params.values(), &g) * T::lit(0.5);
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite quadratic loss".into()));
        }
        Ok((loss, params.with_values(g)))
    }

    fn hvp(
        &self,
        params: &ParamVector<T>,
        v: &ParamVector<T>,
        _: Examples<'_>,
    ) -> Result<ParamVector<T>> {
        self.check(params)?;
        self.check(v)?;
        Ok(v.with_values(self.h.matvec(v.values())))
    }
}

/// Flat-fraction family: `d` baseline eigenvalues from `U[1, 10]`, the `k`
/// smallest of which are replaced by draws from `U[1e-5, 1e-3]`.
pub fn sample_flat_fraction<T: Real>(
    d: usize,
    k: usize,
    seed: u64,
) -> Result<QuadraticLandscape<T>> {
    if k > d {
        return Err(Error::config(format!(
            "cannot flatten {k} of {d} eigenvalues"
        )));
    }
    let mut s = rng::stream(seed, &[0xf1a7]);
    let mut eig: Vec<f64> = (0..d)
        .map(|_| s.random_range(BASELINE_RANGE.0..BASELINE_RANGE.1))
        .collect();
    // flat draws come from their own stream so the baseline does not depend on k
    let mut flat = rng::stream(seed, &[0xf1a7, 1]);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig[a].total_cmp(&eig[b]));
    for &i in order.iter().take(k) {
        eig[i] = flat.random_range(FLAT_RANGE.0..FLAT_RANGE.1);
    }
    QuadraticLandscape::new(eig, rng::derive_seed(seed, &[0xba5e]))
}

/// Mean-scaled family: `d` eigenvalues from `U[0.9 k_mean, 1.1 k_mean]`.
pub fn sample_mean_scaled<T: Real>(
    d: usize,
    k_mean: f64,
    seed: u64,
) -> Result<QuadraticLandscape<T>> {
    if !(k_mean > 0.0) || !k_mean.is_finite() {
        return Err(Error::config("mean eigenvalue must be positive"));
    }
    let mut s = rng::stream(seed, &[0x3ea7]);
    let eig = (0..d)
        .map(|_| s.random_range(0.9 * k_mean..=1.1 * k_mean))
        .collect();
    QuadraticLandscape::new(eig, rng::derive_seed(seed, &[0xba5e]))
}

/// Exact measure values of a quadratic landscape at its minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMeasures {
    pub lpf: f64,
    pub lambda_max: f64,
    pub trace: f64,
    pub frobenius: f64,
    pub d_eff: f64,
}

impl OracleMeasures {
    pub fn get(&self, measure: &str) -> Option<f64> {
        Some(match measure {
            "lpf" => self.lpf,
            "lambda_max" => self.lambda_max,
            "trace" => self.trace,
            "hess_frobenius" => self.frobenius,
            "d_eff" => self.d_eff,
            _ => return None,
        })
    }
}

pub fn oracle_measures<T: Real>(land: &QuadraticLandscape<T>, sigma: f64) -> OracleMeasures {
    let eig = land.eigenvalues();
    let trace: f64 = eig.iter().sum();
    OracleMeasures {
        lpf: sigma * sigma * trace / 2.0,
        lambda_max: eig.iter().copied().fold(0.0, f64::max),
        trace,
        frobenius: eig.iter().map(|l| l * l).sum::<f64>().sqrt(),
        d_eff: eig.iter().map(|l| l / (l + 1.0)).sum(),
    }
}

/// Which synthetic family a sweep walks through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Sweep value is the number of flattened eigenvalues.
    FlatFraction,
    /// Sweep value is the mean eigenvalue.
    MeanScaled,
}

impl SweepKind {
    pub fn param_name(self) -> &'static str {
        match self {
            SweepKind::FlatFraction => "flat_count",
            SweepKind::MeanScaled => "mean_eigenvalue",
        }
    }
}

/// Knobs of the estimators compared against the oracle in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub dim: usize,
    pub sigma: f64,
    pub lpf_samples: usize,
    pub frobenius_samples: usize,
    pub lanczos_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            dim: 100,
            sigma: 0.01,
            lpf_samples: 100_000,
            frobenius_samples: 1000,
            lanczos_steps: 100,
        }
    }
}

/// One row of the landscape sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_param: String,
    pub sweep_value: f64,
    pub measure: String,
    pub oracle_value: f64,
    pub estimated_value: f64,
    pub seed: u64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "sweep_param,sweep_value,measure,oracle_value,estimated_value,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.sweep_param,
            self.sweep_value,
            self.measure,
            self.oracle_value,
            self.estimated_value,
            self.seed
        )
    }
}

/// Builds each landscape of the sweep and compares oracle values with the
/// stochastic estimators of the sharpness module evaluated at `θ* = 0`.
pub fn run_sweep(
    kind: SweepKind,
    values: &[f64],
    cfg: &SweepConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &v in values {
        let land: QuadraticLandscape<f64> = match kind {
            SweepKind::FlatFraction => {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::config(format!(
                        "flat count {v} is not a non-negative integer"
                    )));
                }
                sample_flat_fraction(cfg.dim, v as usize, seed)?
            }
            SweepKind::MeanScaled => sample_mean_scaled(cfg.dim, v, seed)?,
        };
        let oracle = oracle_measures(&land, cfg.sigma);
        let theta = land.minimizer();
        let lpf = sharpness::lpf_measure(&land, &theta, cfg.sigma, cfg.lpf_samples, seed)?;
        let frob = sharpness::hessian_frobenius(&land, &theta, cfg.frobenius_samples, seed)?;
        let k = cfg.lanczos_steps.min(land.dim());
        let spec = sharpness::lanczos_spectrum(&land, &theta, k, seed)?;
        let sm = sharpness::spectrum_measures(&spec, land.dim())?;
        for (name, est) in [
            ("lpf", lpf),
            ("lambda_max", sm.lambda_max),
            ("trace", sm.trace),
            ("hess_frobenius", frob),
            ("d_eff", sm.d_eff),
        ] {
            rows.push(SweepRow {
                sweep_param: kind.param_name().into(),
                sweep_value: v,
                measure: name.into(),
                oracle_value: oracle.get(name).expect("known measure"),
                estimated_value: est,
                seed,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hessian_has_requested_spectrum() {
        let land: QuadraticLandscape =
            QuadraticLandscape::new(vec![3.0, 1.0, 0.5, 0.0], 9).unwrap();
        let h = land.hessian();
        let mut dense = nalgebra::DMatrix::<f64>::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                dense[(i, j)] = h[(i, j)];
            }
        }
        let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(dense)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ev.iter().zip([3.0, 1.0, 0.5, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_is_the_quadratic() {
        let land: QuadraticLandscape = QuadraticLandscape::new(vec![2.0, 5.0, 1.0], 4).unwrap();
        let p = ParamVector::new(land.layout(), vec![0.3, -1.0, 2.0]).unwrap();
        let (l, g) = land.loss_grad(&p, Examples::All).unwrap();
        assert_relative_eq!(l, land.frn(p.values()) / 2.0, epsilon = 1e-14);
        let hv = land.hvp(&land.minimizer(), &p, Examples::All).unwrap();
        assert_eq!(g.values(), hv.values());
        assert_eq!(land.loss(&land.minimizer(), Examples::All).unwrap(), 0.0);
    }

    #[test]
    fn flat_fraction_bounds() {
        let all: QuadraticLandscape = sample_flat_fraction(20, 20, 1).unwrap();
        assert!(all
            .eigenvalues()
            .iter()
            .all(|&l| (FLAT_RANGE.0..=FLAT_RANGE.1).contains(&l)));
        let none: QuadraticLandscape = sample_flat_fraction(20, 0, 1).unwrap();
        assert!(none.eigenvalues().iter().all(|&l| l >= BASELINE_RANGE.0));
        assert!(matches!(
            sample_flat_fraction::<f64>(3, 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flat_fraction_trace_decreases_in_k() {
        for seed in 0..5 {
            let traces: Vec<f64> = (0..=10)
                .map(|k| {
                    oracle_measures(&sample_flat_fraction::<f64>(10, k, seed).unwrap(), 0.1).trace
                })
                .collect();
            assert!(traces.windows(2).all(|w| w[1] < w[0]), "{traces:?}");
        }
    }

    #[test]
    fn mean_scaled_support_and_mean() {
        let land: QuadraticLandscape = sample_mean_scaled(100, 100.0, 2).unwrap();
        assert!(land
            .eigenvalues()
            .iter()
            .all(|&l| (90.0..=110.0).contains(&l)));
        let mean = land.eigenvalues().iter().sum::<f64>() / 100.0;
        assert!((95.0..=105.0).contains(&mean));
    }

    #[test]
    fn oracle_values() {
        let land: QuadraticLandscape = QuadraticLandscape::diagonal(vec![1.0; 10]).unwrap();
        let o = oracle_measures(&land, 0.1);
        assert_relative_eq!(o.lpf, 0.05, epsilon = 1e-15);
        assert_relative_eq!(o.d_eff, 5.0, epsilon = 1e-15);
        let zero: QuadraticLandscape = QuadraticLandscape::diagonal(vec![0.0; 4]).unwrap();
        let z = oracle_measures(&zero, 0.1);
        assert_eq!(
            [z.lpf, z.lambda_max, z.trace, z.frobenius, z.d_eff],
            [0.0; 5]
        );
    }

    #[test]
    fn flatter_mean_gives_smaller_oracles() {
        let a = oracle_measures(&sample_mean_scaled::<f64>(50, 1.0, 3).unwrap(), 0.01);
        let b = oracle_measures(&sample_mean_scaled::<f64>(50, 100.0, 3).unwrap(), 0.01);
        assert!(a.lpf < b.lpf && a.lambda_max < b.lambda_max && a.trace < b.trace);
        assert!(a.frobenius < b.frobenius && a.d_eff < b.d_eff);
    }

    #[test]
    fn negative_eigenvalue_rejected() {
        assert!(QuadraticLandscape::<f64>::diagonal(vec![1.0, -0.1]).is_err());
    }
}
