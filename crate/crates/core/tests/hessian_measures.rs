use flatmin_core::autodiff::Examples;
use flatmin_core::models::{balance, build_mlp};
use flatmin_core::optimizers::msgd_step;
use flatmin_core::sharpness::{
    averaged_spectrum_measures, fisher_rao_norm, hessian_frobenius, lanczos_spectrum,
    spectrum_measures,
};
use flatmin_core::{
    rng, Batch, Matrix, MlpObjective, Model, Objective, OptimizerState, ParamVector,
};

fn dataset() -> Batch {
    let n = 60;
    let mut s = rng::stream(21, &[]);
    let x: Vec<f64> = rng::standard_normal_vec(&mut s, n * 3);
    let labels = (0..n)
        .map(|i| {
            usize::from(x[3 * i] + 0.5 * x[3 * i + 1] > 0.0) + 2 * usize::from(x[3 * i + 2] > 0.7)
        })
        .collect();
    Batch::new(Matrix::from_vec(n, 3, x).unwrap(), labels, 4).unwrap()
}

/// A lightly trained, balanced 3-6-4 network (52 parameters).
fn trained() -> (Model, ParamVector, Batch) {
    let data = dataset();
    let (model, p) = build_mlp::<f64>(&[3, 6, 4], 5).unwrap();
    let obj = MlpObjective::new(&model, &data);
    let all: Vec<usize> = (0..data.len()).collect();
    let mut st = OptimizerState::new(p, 0.1, 0.9, 0.0).unwrap();
    for _ in 0..300 {
        msgd_step(&mut st, &obj, &all).unwrap();
    }
    let (b, _) = balance(&model, &st.params).unwrap();
    (model, b, data)
}

fn dense_hessian<O: Objective<f64>>(obj: &O, p: &ParamVector) -> nalgebra::DMatrix<f64> {
    let n = p.len();
    let mut h = nalgebra::DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = p.zeros_like();
        e.values_mut()[j] = 1.0;
        let col = obj.hvp(p, &e, Examples::All).unwrap();
        for i in 0..n {
            h[(i, j)] = col.values()[i];
        }
    }
    // symmetrize away rounding
    (&h + h.transpose()) * 0.5
}

#[test]
fn spectrum_and_frobenius_match_dense_oracle() {
    let (model, p, data) = trained();
    let obj = MlpObjective::new(&model, &data);
    let h = dense_hessian(&obj, &p);
    let eig = nalgebra::SymmetricEigen::new(h.clone());
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    let trace = h.trace();
    let frob = h.norm();

    let spec = lanczos_spectrum(&obj, &p, p.len(), 0).unwrap();
    assert!((spec.ritz_values[0] - lmax).abs() <= 0.01 * lmax.abs());
    for r in &spec.ritz_values {
        assert!(
            *r <= lmax + 1e-8 && *r >= lmin - 1e-8,
            "Ritz value {r} outside [{lmin}, {lmax}]"
        );
    }

    let avg = averaged_spectrum_measures(&obj, &p, p.len(), 10, 1).unwrap();
    assert!((avg.lambda_max - lmax).abs() <= 0.01 * lmax.abs());
    eprintln!("trace estimate {} vs exact {trace}", avg.trace);
    assert!((avg.trace - trace).abs() <= 0.05 * trace.abs());

    let f = hessian_frobenius(&obj, &p, 1000, 2).unwrap();
    assert!((f - frob).abs() <= 0.05 * frob, "{f} vs {frob}");
}

#[test]
fn fisher_rao_matches_dense_quadratic_form() {
    let (model, p, data) = trained();
    let obj = MlpObjective::new(&model, &data);
    let h = dense_hessian(&obj, &p);
    let v = nalgebra::DVector::from_column_slice(p.values());
    let exact = (v.transpose() * &h * &v)[(0, 0)];
    let frn = fisher_rao_norm(&obj, &p).unwrap();
    assert!((frn - exact).abs() <= 1e-9 * exact.abs().max(1.0));
}

#[test]
fn short_lanczos_interlaces() {
    let (model, p, data) = trained();
    let obj = MlpObjective::new(&model, &data);
    let eig = nalgebra::SymmetricEigen::new(dense_hessian(&obj, &p));
    let spec = lanczos_spectrum(&obj, &p, 12, 4).unwrap();
    assert_eq!(spec.k, 12);
    let m = spectrum_measures(&spec, p.len()).unwrap();
    assert!(m.lambda_max <= eig.eigenvalues.max() + 1e-9);
    assert!(spec
        .ritz_values
        .iter()
        .all(|r| *r >= eig.eigenvalues.min() - 1e-9));
}

/// Relative standard deviation of a `probes`-vector Rademacher trace estimate.
fn trace_rel_std(h: &nalgebra::DMatrix<f64>, probes: usize) -> f64 {
    let n = h.nrows();
    let off: f64 = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| h[(i, j)].powi(2))
        .sum();
    (2.0 * off / probes as f64).sqrt() / h.trace().abs()
}

#[test]
fn trace_error_follows_probe_variance() {
    let (model, p, data) = trained();
    let obj = MlpObjective::new(&model, &data);
    let h = dense_hessian(&obj, &p);
    let trace = h.trace();
    for (probes, seed) in [(10, 7), (10, 8), (400, 9)] {
        let est = averaged_spectrum_measures(&obj, &p, 20, probes, seed)
            .unwrap()
            .trace;
        let rel = (est - trace).abs() / trace.abs();
        let sd = trace_rel_std(&h, probes);
        assert!(
            rel <= 3.0 * sd,
            "{probes} probes: relative error {rel} vs std {sd}"
        );
    }
}
