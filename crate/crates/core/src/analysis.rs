//! Rank correlation, normalization, and generalization-bound calculators.
//!
//! The stability bounds compare plain SGD on an `α`-Lipschitz, `β`-smooth
//! loss with SGD on its Gaussian smoothing of scale `σ`, which is
//! `min(α/σ, β)`-smooth. With step sizes `η_t ≤ c/t` over `T` steps and
//! `p = 1/(βc + 1)`, the SGD bound reads
//!
//! ```text
//! ε ≤ (2cα²)^p T^(1-p) / ((1 - p)(m - 1))
//! ```
//!
//! and the smoothed bound is the same expression with `p̂ = 1/(min(α/σ, β)c + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub tau: f64,
    pub n: usize,
    pub ci95_halfwidth: f64,
}

/// Pair counts behind Kendall's τ_b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub pairs: u64,
    /// Pairs tied in x (including joint ties).
    pub ties_x: u64,
    /// Pairs tied in y (including joint ties).
    pub ties_y: u64,
    /// Concordant minus discordant pairs.
    pub score: i64,
}

impl PairCounts {
    /// `τ_b = S / sqrt((n0 - n1)(n0 - n2))`.
    pub fn tau_b(&self) -> Result<f64> {
        let a = self.pairs - self.ties_x;
        let b = self.pairs - self.ties_y;
        if a == 0 || b == 0 {
            return Err(Error::UndefinedCorrelation(
                "one of the arrays is constant".into(),
            ));
        }
        Ok(self.score as f64 / ((a as f64) * (b as f64)).sqrt())
    }
}

/// Normal-approximation 95% halfwidth of τ under independence.
pub fn kendall_ci95(n: usize) -> f64 {
    let n = n as f64;
    1.96 * (2.0 * (2.0 * n + 5.0) / (9.0 * n * (n - 1.0))).sqrt()
}

fn tied_pairs(run: u64) -> u64 {
    run * (run - 1) / 2
}

/// Pair counts in O(n log n): sort by `(x, y)`, then count the inversions of
/// `y` with a merge sort.
pub fn kendall_pair_counts(x: &[f64], y: &[f64]) -> Result<PairCounts> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::config(format!(
            "length mismatch: {} vs {}",
            n,
            y.len()
        )));
    }
    if n < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least two points, got {n}"
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::UndefinedCorrelation("NaN in input".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    let (mut ties_x, mut joint) = (0u64, 0u64);
    let (mut run_x, mut run_xy) = (1u64, 1u64);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x[a] == x[b] {
            run_x += 1;
            if y[a] == y[b] {
                run_xy += 1;
            } else {
                joint += tied_pairs(run_xy);
                run_xy = 1;
            }
        } else {
            ties_x += tied_pairs(run_x);
            joint += tied_pairs(run_xy);
            run_x = 1;
            run_xy = 1;
        }
    }
    ties_x += tied_pairs(run_x);
    joint += tied_pairs(run_xy);

    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = ys.clone();
    let swaps = merge_count(&mut ys, &mut buf);

    let mut ties_y = 0u64;
    let mut run_y = 1u64;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_y += 1;
        } else {
            ties_y += tied_pairs(run_y);
            run_y = 1;
        }
    }
    ties_y += tied_pairs(run_y);

    let pairs = tied_pairs(n as u64);
    let score = pairs as i64 - ties_x as i64 - ties_y as i64 + joint as i64 - 2 * swaps as i64;
    Ok(PairCounts {
        pairs,
        ties_x,
        ties_y,
        score,
    })
}

/// Stable merge sort of `v` returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(l, bl) + merge_count(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Tie-corrected Kendall τ_b with a normal-approximation 95% interval.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    let counts = kendall_pair_counts(x, y)?;
    Ok(CorrelationResult {
        tau: counts.tau_b()?,
        n: x.len(),
        ci95_halfwidth: kendall_ci95(x.len()),
    })
}

/// Test error minus train error.
pub fn generalization_gap(train_error: f64, test_error: f64) -> f64 {
    test_error - train_error
}

/// Min-max scaling to `[0, 1]`.
pub fn normalize_measures(values: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.iter().any(|v| !v.is_finite()) || !(hi > lo) {
        return Err(Error::DegenerateNormalization);
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeBoundInputs {
    /// Lipschitz constant α of the loss.
    pub alpha_lip: f64,
    /// Smoothness β of the loss.
    pub beta_smooth: f64,
    /// Step-size constant: `η_t ≤ c / t`.
    pub c: f64,
    /// Number of steps.
    pub t: f64,
    /// Smoothing scale.
    pub sigma: f64,
}

impl GeBoundInputs {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_lip, self.beta_smooth, self.c, self.t, self.sigma];
        if all.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::config("bound inputs must be finite and positive"));
        }
        Ok(())
    }

    /// `p = 1 / (βc + 1)`.
    pub fn p(&self) -> f64 {
        1.0 / (self.beta_smooth * self.c + 1.0)
    }

    /// Smoothness of the smoothed loss, `min(α/σ, β)`.
    pub fn smoothed_beta(&self) -> f64 {
        (self.alpha_lip / self.sigma).min(self.beta_smooth)
    }

    /// `p̂ = 1 / (min(α/σ, β) c + 1)`.
    pub fn p_hat(&self) -> f64 {
        1.0 / (self.smoothed_beta() * self.c + 1.0)
    }

    /// True when smoothing does not improve on `β` (`σ ≤ α/β`).
    pub fn collapsed(&self) -> bool {
        self.alpha_lip / self.sigma >= self.beta_smooth
    }

    /// Step count above which the ratio drops below one.
    pub fn ratio_threshold(&self) -> f64 {
        let (p, ph) = (self.p(), self.p_hat());
        let base = 2.0 * self.c * self.alpha_lip * self.alpha_lip;
        if self.collapsed() {
            return f64::INFINITY;
        }
        base * ((1.0 - p) / (1.0 - ph)).powf(1.0 / (ph - p))
    }

    /// Step count above which the ratio decreases in `σ`: the derivative of
    /// `ln ρ` in `p̂` is `1/(1 - p̂) + ln(2cα²/T)`, negative once
    /// `T > 2cα² e^{1/(1-p̂)}`.
    pub fn sigma_monotone_threshold(&self) -> f64 {
        2.0 * self.c * self.alpha_lip * self.alpha_lip * (1.0 / (1.0 - self.p_hat())).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeRatio {
    pub rho: f64,
    pub p: f64,
    pub p_hat: f64,
    /// `σ ≤ α/β`: the smoothed bound equals the SGD bound and `ρ = 1`.
    pub collapsed: bool,
}

/// Ratio of the smoothed-SGD bound to the SGD bound,
/// `ρ = (1 - p)/(1 - p̂) (2cα²/T)^(p̂ - p)`.
pub fn ge_ratio(inp: &GeBoundInputs) -> Result<GeRatio> {
    inp.validate()?;
    let (p, p_hat) = (inp.p(), inp.p_hat());
    if inp.collapsed() {
        return Ok(GeRatio {
            rho: 1.0,
            p,
            p_hat: p,
            collapsed: true,
        });
    }
    let base = 2.0 * inp.c * inp.alpha_lip * inp.alpha_lip / inp.t;
    let rho = (1.0 - p) / (1.0 - p_hat) * base.powf(p_hat - p);
    Ok(GeRatio {
        rho,
        p,
        p_hat,
        collapsed: false,
    })
}

fn stability_bound(inp: &GeBoundInputs, p: f64, m: usize) -> Result<f64> {
    inp.validate()?;
    if m < 2 {
        return Err(Error::config("bound needs at least two examples"));
    }
    let scale = (2.0 * inp.c * inp.alpha_lip * inp.alpha_lip).powf(p) * inp.t.powf(1.0 - p);
    Ok(scale / ((1.0 - p) * (m as f64 - 1.0)))
}

/// Uniform-stability generalization bound of SGD on the raw loss.
pub fn ge_bound_sgd(inp: &GeBoundInputs, m: usize) -> Result<f64> {
    stability_bound(inp, inp.p(), m)
}

/// The same bound for SGD on the Gaussian-smoothed loss.
pub fn ge_bound_lpf(inp: &GeBoundInputs, m: usize) -> Result<f64> {
    stability_bound(
        inp,
        if inp.collapsed() {
            inp.p()
        } else {
            inp.p_hat()
        },
        m,
    )
}

/// Analytic test functions with known Lipschitz and smoothness constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `α|x|`: α-Lipschitz, not smooth.
    Abs { alpha: f64 },
    /// Huber with slope `alpha` and knee `delta`: α-Lipschitz, α/δ-smooth.
    Huber { alpha: f64, delta: f64 },
    /// `βx²/2` inside `|x| ≤ radius`, continued linearly outside:
    /// βR-Lipschitz, β-smooth.
    ClippedQuadratic { beta: f64, radius: f64 },
    /// `α‖x‖` in `dim` dimensions.
    Norm { alpha: f64, dim: usize },
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        match *self {
            TestFunction::Norm { dim, .. } => dim,
            _ => 1,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            TestFunction::Abs { alpha }
            | TestFunction::Huber { alpha, .. }
            | TestFunction::Norm { alpha, .. } => alpha,
            TestFunction::ClippedQuadratic { beta, radius } => beta * radius,
        }
    }

    /// Smoothness constant, infinite for the non-smooth functions.
    pub fn smoothness(&self) -> f64 {
        match *self {
            TestFunction::Huber { alpha, delta } => alpha / delta,
            TestFunction::ClippedQuadratic { beta, .. } => beta,
            _ => f64::INFINITY,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            TestFunction::Abs { alpha } => alpha > 0.0,
            TestFunction::Huber { alpha, delta } => alpha > 0.0 && delta > 0.0,
            TestFunction::ClippedQuadratic { beta, radius } => beta > 0.0 && radius > 0.0,
            TestFunction::Norm { alpha, dim } => alpha > 0.0 && dim >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid test function {self:?}")))
        }
    }

    fn scalar(&self, r: f64) -> (f64, f64) {
        match *self {
            TestFunction::Abs { alpha } | TestFunction::Norm { alpha, .. } => {
                (alpha * r.abs(), alpha * sign(r))
            }
            TestFunction::Huber { alpha, delta } => {
                if r.abs() <= delta {
                    (alpha * r * r / (2.0 * delta), alpha * r / delta)
                } else {
                    (alpha * (r.abs() - delta / 2.0), alpha * sign(r))
                }
            }
            TestFunction::ClippedQuadratic { beta, radius } => {
                if r.abs() <= radius {
                    (beta * r * r / 2.0, beta * r)
                } else {
                    (
                        beta * radius * (r.abs() - radius / 2.0),
                        beta * radius * sign(r),
                    )
                }
            }
        }
    }

    /// Value and gradient at `x`.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match *self {
            TestFunction::Norm { alpha, .. } => {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let g = if n > 0.0 {
                    x.iter().map(|v| alpha * v / n).collect()
                } else {
                    vec![0.0; x.len()]
                };
                (alpha * n, g)
            }
            _ => {
                let (v, g) = self.scalar(x[0]);
                (v, vec![g])
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    pub function: TestFunction,
    pub sigma: f64,
    pub samples: usize,
    pub grid_points: usize,
    pub lipschitz_empirical: f64,
    pub lipschitz_bound: f64,
    pub smoothness_empirical: f64,
    pub smoothness_bound: f64,
    /// Smallest `l_μ - l` over the grid (should be ≥ 0 for convex `l`).
    pub min_gap: f64,
    /// Largest `l_μ - l` over the grid (should be ≤ `ασ√d`).
    pub max_gap: f64,
    pub gap_bound: f64,
    /// Three standard errors of the Monte Carlo smoothed value.
    pub mc_tolerance: f64,
    pub lipschitz_ok: bool,
    pub smoothness_ok: bool,
    pub sandwich_ok: bool,
}

impl SmoothingReport {
    pub fn all_ok(&self) -> bool {
        self.lipschitz_ok && self.smoothness_ok && self.sandwich_ok
    }
}

pub const SMOOTHING_TOLERANCE: f64 = 0.05;

/// Monte Carlo check of the Gaussian-smoothing properties on a test function:
/// the smoothed function `l_μ(x) = E l(x + σz)` stays α-Lipschitz, becomes
/// `min(α/σ, β)`-smooth, and satisfies `l ≤ l_μ ≤ l + ασ√d` for convex `l`.
///
/// `l_μ` and its gradient are averaged over the same `samples` draws at every
/// point of a grid along the first axis spanning `±4σ` around the kink (plus
/// the function's own scale) with spacing `σ/4`. Lipschitz and smoothness
/// constants are the largest finite-difference ratios between neighbours.
pub fn smoothing_property_check(
    f: &TestFunction,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<SmoothingReport> {
    f.validate()?;
    if !(sigma > 0.0) || samples < 2 {
        return Err(Error::config(
            "smoothing check needs sigma > 0 and at least two samples",
        ));
    }
    let d = f.dim();
    let mut s = rng::stream(seed, &[0x7e01]);
    let z: Vec<f64> = rng::standard_normal_vec(&mut s, samples * d);

    let extent = 4.0 * sigma
        + match *f {
            TestFunction::Huber { delta, .. } => delta,
            TestFunction::ClippedQuadratic { radius, .. } => radius,
            _ => 0.0,
        };
    let h = sigma / 4.0;
    let half = (extent / h).ceil() as i64;
    let grid: Vec<f64> = (-half..=half).map(|j| j as f64 * h).collect();

    struct Point {
        raw: f64,
        value: f64,
        sd: f64,
        grad: Vec<f64>,
    }
    let eval = |x0: f64| -> Point {
        let mut x = vec![0.0; d];
        x[0] = x0;
        let (raw, _) = f.eval(&x);
        let (mut sum, mut sum2) = (0.0, 0.0);
        let mut grad = vec![0.0; d];
        let mut p = vec![0.0; d];
        for i in 0..samples {
            for k in 0..d {
                p[k] = x[k] + sigma * z[i * d + k];
            }
            let (v, g) = f.eval(&p);
            sum += v;
            sum2 += v * v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let m = samples as f64;
        let mean = sum / m;
        let var = (sum2 / m - mean * mean).max(0.0) * m / (m - 1.0);
        grad.iter_mut().for_each(|g| *g /= m);
        Point {
            raw,
            value: mean,
            sd: (var / m).sqrt(),
            grad,
        }
    };
    let pts: Vec<Point> = grid.iter().map(|&x| eval(x)).collect();

    let mut lip: f64 = 0.0;
    let mut smooth: f64 = 0.0;
    for w in pts.windows(2) {
        lip = lip.max((w[1].value - w[0].value).abs() / h);
        let dg = w[1]
            .grad
            .iter()
            .zip(&w[0].grad)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        smooth = smooth.max(dg / h);
    }
    let alpha = f.lipschitz();
    let smooth_bound = (alpha / sigma).min(f.smoothness());
    let gap_bound = alpha * sigma * (d as f64).sqrt();
    let mc_tolerance = 3.0 * pts.iter().map(|p| p.sd).fold(0.0, f64::max);
    let min_gap = pts
        .iter()
        .map(|p| p.value - p.raw)
        .fold(f64::INFINITY, f64::min);
    let max_gap = pts
        .iter()
        .map(|p| p.value - p.raw)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(SmoothingReport {
        function: *f,
        sigma,
        samples,
        grid_points: grid.len(),
        lipschitz_empirical: lip,
        lipschitz_bound: alpha,
        smoothness_empirical: smooth,
        smoothness_bound: smooth_bound,
        min_gap,
        max_gap,
        gap_bound,
        mc_tolerance,
        lipschitz_ok: lip <= alpha * (1.0 + SMOOTHING_TOLERANCE),
        smoothness_ok: smooth <= smooth_bound * (1.0 + SMOOTHING_TOLERANCE),
        sandwich_ok: min_gap >= -mc_tolerance && max_gap <= gap_bound + mc_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn brute_force(x: &[f64], y: &[f64]) -> PairCounts {
        let n = x.len();
        let (mut tx, mut ty, mut score) = (0u64, 0u64, 0i64);
        for i in 0..n {
            for j in i + 1..n {
                let dx = x[i].partial_cmp(&x[j]).unwrap();
                let dy = y[i].partial_cmp(&y[j]).unwrap();
                use std::cmp::Ordering::Equal;
                if dx == Equal {
                    tx += 1;
                }
                if dy == Equal {
                    ty += 1;
                }
                if dx != Equal && dy != Equal {
                    score += if dx == dy { 1 } else { -1 };
                }
            }
        }
        PairCounts {
            pairs: (n * (n - 1) / 2) as u64,
            ties_x: tx,
            ties_y: ty,
            score,
        }
    }

    #[test]
    fn tau_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap().tau, 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap().tau, -1.0);
        assert_relative_eq!(
            kendall_tau(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap().tau,
            4.0 / 6.0,
            epsilon = 1e-15
        );
        assert!(matches!(
            kendall_tau(&x, &[2.0; 4]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(kendall_tau(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ci_halfwidth() {
        assert_relative_eq!(
            kendall_ci95(10),
            1.96 * (50.0f64 / 810.0).sqrt(),
            epsilon = 1e-15
        );
    }

    proptest! {
        #[test]
        fn matches_brute_force(pairs in prop::collection::vec((0u8..6, 0u8..6), 2..120)) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assert_eq!(kendall_pair_counts(&x, &y).unwrap(), brute_force(&x, &y));
        }

        #[test]
        fn normalize_is_affine_invariant(v in prop::collection::vec(-100.0f64..100.0, 2..30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-6);
            let n1 = normalize_measures(&v).unwrap();
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let n2 = normalize_measures(&w).unwrap();
            for (p, q) in n1.iter().zip(&n2) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gap_and_normalization() {
        assert_relative_eq!(generalization_gap(0.01, 0.10), 0.09, epsilon = 1e-15);
        assert_eq!(generalization_gap(0.3, 0.3), 0.0);
        assert_eq!(generalization_gap(0.0, 0.25), 0.25);
        assert_eq!(
            normalize_measures(&[2.0, 4.0, 6.0]).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert!(matches!(
            normalize_measures(&[3.0]),
            Err(Error::DegenerateNormalization)
        ));
        assert!(matches!(
            normalize_measures(&[1.0, 1.0]),
            Err(Error::DegenerateNormalization)
        ));
    }

    fn inputs(sigma: f64, t: f64) -> GeBoundInputs {
        GeBoundInputs {
            alpha_lip: 1.0,
            beta_smooth: 10.0,
            c: 0.1,
            t,
            sigma,
        }
    }

    #[test]
    fn ratio_worked_example() {
        let inp = inputs(1.0, 1e6);
        let r = ge_ratio(&inp).unwrap();
        assert_relative_eq!(r.p, 0.5, epsilon = 1e-15);
        assert_relative_eq!(r.p_hat, 1.0 / 1.1, epsilon = 1e-15);
        let direct = (0.5 / (1.0 - 1.0 / 1.1)) * (0.2f64 / 1e6).powf(1.0 / 1.1 - 0.5);
        assert_relative_eq!(r.rho, direct, epsilon = 1e-15);
        assert!(inp.t > inp.ratio_threshold() && r.rho < 1.0);
        assert!(inp.t > inp.sigma_monotone_threshold());
        assert!(ge_ratio(&inputs(2.0, 1e6)).unwrap().rho < r.rho);
    }

    #[test]
    fn ratio_collapses_below_critical_sigma() {
        for sigma in [0.01, 0.05, 0.1] {
            let r = ge_ratio(&inputs(sigma, 1e6)).unwrap();
            assert!(r.collapsed);
            assert_eq!(r.rho, 1.0);
            assert_eq!(r.p, r.p_hat);
        }
    }

    #[test]
    fn bounds_ratio_and_scaling() {
        let inp = inputs(1.5, 1e5);
        let sgd = ge_bound_sgd(&inp, 1000).unwrap();
        let lpf = ge_bound_lpf(&inp, 1000).unwrap();
        assert_relative_eq!(lpf / sgd, ge_ratio(&inp).unwrap().rho, max_relative = 1e-12);
        let doubled = ge_bound_sgd(&inputs(1.5, 2e5), 1000).unwrap();
        assert_relative_eq!(doubled / sgd, 2f64.powf(1.0 / 2.0), max_relative = 1e-12);
        let more = ge_bound_sgd(&inp, 2001).unwrap();
        assert_relative_eq!(more / sgd, 999.0 / 2000.0, max_relative = 1e-12);
        assert!(ge_bound_sgd(&inp, 1).is_err());
    }

    #[test]
    fn smoothed_abs_properties() {
        for sigma in [0.1, 0.5, 1.0] {
            let r = smoothing_property_check(&TestFunction::Abs { alpha: 2.0 }, sigma, 20_000, 1)
                .unwrap();
            assert!(r.all_ok(), "{r:?}");
            // α·sqrt(2/π)/σ up to finite differencing
            assert!(
                (r.smoothness_empirical - 2.0 * (2.0 / std::f64::consts::PI).sqrt() / sigma).abs()
                    < 0.1 / sigma
            );
        }
    }

    #[test]
    fn smoothness_halves_when_sigma_doubles() {
        let f = TestFunction::Abs { alpha: 1.0 };
        let a = smoothing_property_check(&f, 0.5, 20_000, 2).unwrap();
        let b = smoothing_property_check(&f, 1.0, 20_000, 2).unwrap();
        assert!((b.smoothness_empirical / a.smoothness_empirical - 0.5).abs() < 0.05);
    }

    #[test]
    fn other_catalog_functions() {
        let cases = [
            TestFunction::Huber {
                alpha: 1.0,
                delta: 0.5,
            },
            TestFunction::ClippedQuadratic {
                beta: 2.0,
                radius: 1.0,
            },
            TestFunction::Norm { alpha: 1.0, dim: 3 },
        ];
        for f in cases {
            for sigma in [0.1, 1.0] {
                let r = smoothing_property_check(&f, sigma, 20_000, 3).unwrap();
                assert!(r.all_ok(), "{r:?}");
            }
        }
    }
}
