//! Dense network construction, prediction and filter-norm balancing.
//!
//! Balancing rescales every hidden filter (incoming weight row plus bias) to
//! unit norm and pushes the inverse scale into the next layer's matching input
//! column. Because `relu(c x) = c relu(x)` for `c > 0` the network function
//! is unchanged. Layers are processed first to last; the output layer absorbs
//! the last compensation and is left unnormalized.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Layout, ParamVector};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Architecture of a dense network with a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    layout: Arc<Layout>,
}

impl Model {
    /// `layer_sizes = [d_in, h1, ..., C]`; one activation per hidden layer.
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(
                "a model needs an input size and at least one layer",
            ));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config(format!(
                "layer sizes must be positive: {layer_sizes:?}"
            )));
        }
        if activations.len() != layer_sizes.len() - 2 {
            return Err(Error::config(format!(
                "{} hidden layers but {} activations",
                layer_sizes.len() - 2,
                activations.len()
            )));
        }
        let layout = Arc::new(Layout::dense(&layer_sizes));
        Ok(Model {
            layer_sizes,
            activations,
            layout,
        })
    }

    /// ReLU on every hidden layer.
    pub fn relu(layer_sizes: Vec<usize>) -> Result<Self> {
        let hidden = layer_sizes.len().saturating_sub(2);
        Model::new(layer_sizes, vec![Activation::Relu; hidden])
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    /// Activation after layer `l` (only meaningful for hidden layers).
    pub fn activation(&self, l: usize) -> Activation {
        self.activations
            .get(l)
            .copied()
            .unwrap_or(Activation::Identity)
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn layout(&self) -> Arc<Layout> {
        self.layout.clone()
    }

    /// Offset of the weight block and of the bias block of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let e = &self.layout.entries()[2 * l];
        (e.offset, e.offset + e.len)
    }
}

/// He-initialized ReLU network: weights `N(0, 2 / fan_in)`, zero biases.
pub fn build_mlp<T: Real>(layer_sizes: &[usize], seed: u64) -> Result<(Model, ParamVector<T>)> {
    if layer_sizes.is_empty() {
        return Err(Error::config("empty layer sizes"));
    }
    let model = Model::relu(layer_sizes.to_vec())?;
    let mut values = Vec::with_capacity(model.num_params());
    for (l, w) in layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        let mut s = rng::stream(seed, &[0x1417, l as u64]);
        let z: Vec<f64> = rng::standard_normal_vec(&mut s, fan_in * fan_out);
        values.extend(z.into_iter().map(|v| T::lit(v * std)));
        values.extend(std::iter::repeat_n(T::zero(), fan_out));
    }
    let params = ParamVector::new(model.layout(), values)?;
    Ok((model, params))
}

/// Softmax class probabilities for each input row.
pub fn predict_proba<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    inputs: &Matrix<T>,
) -> Result<Matrix<T>> {
    autodiff::probabilities(model, params, inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    /// Norm of every filter, layout order, before balancing.
    pub per_filter_norms_before: Vec<f64>,
    pub per_filter_norms_after: Vec<f64>,
    /// Norms of the output-layer filters after balancing: the diagonal factor
    /// folded into the last weight matrix.
    pub output_factors: Vec<f64>,
    /// Largest relative logit change on the verification probe inputs.
    pub max_output_deviation: f64,
}

const BALANCE_PROBES: usize = 256;

/// Rescales hidden filters to unit norm without changing the network function.
pub fn balance<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
) -> Result<(ParamVector<T>, BalanceReport)> {
    if *params.layout().as_ref() != *model.layout() {
        return Err(Error::arch("parameter layout does not match model"));
    }
    let before: Vec<f64> = params
        .layout()
        .filters()
        .iter()
        .map(|f| params.filter_norm(f).as_f64())
        .collect();
    let mut out = params.clone();
    let tol = T::lit(4.0) * T::epsilon();
    let sizes = model.layer_sizes();

    for l in 0..model.num_layers() - 1 {
        let (fan_in, fan_out, next_out) = (sizes[l], sizes[l + 1], sizes[l + 2]);
        let (w_off, b_off) = model.offsets(l);
        let (next_w, _) = model.offsets(l + 1);
        let v = out.values_mut();
        for unit in 0..fan_out {
            let row = w_off + unit * fan_in;
            let sq: T = v[row..row + fan_in].iter().map(|&x| x * x).sum::<T>()
                + v[b_off + unit] * v[b_off + unit];
            let n = sq.sqrt();
            if n == T::zero() {
                return Err(Error::DegenerateFilter { layer: l, unit });
            }
            if (n - T::one()).abs() <= tol {
                continue;
            }
            let inv = T::one() / n;
            v[row..row + fan_in].iter_mut().for_each(|x| *x *= inv);
            v[b_off + unit] *= inv;
            for k in 0..next_out {
                v[next_w + k * fan_out + unit] *= n;
            }
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric(
            "balancing produced non-finite parameters".into(),
        ));
    }

    let after: Vec<f64> = out
        .layout()
        .filters()
        .iter()
        .map(|f| out.filter_norm(f).as_f64())
        .collect();
    let n_out = model.num_classes();
    let output_factors = after[after.len() - n_out..].to_vec();

    let mut s = rng::stream(0xba1a, &[model.input_dim() as u64]);
    let probes = Matrix::from_vec(
        BALANCE_PROBES,
        model.input_dim(),
        rng::standard_normal_vec(&mut s, BALANCE_PROBES * model.input_dim()),
    )?;
    let max_output_deviation = output_deviation(model, params, &out, &probes)?;

    Ok((
        out,
        BalanceReport {
            per_filter_norms_before: before,
            per_filter_norms_after: after,
            output_factors,
            max_output_deviation,
        },
    ))
}

/// Largest logit difference between two parameter vectors on `inputs`,
/// relative to the largest logit magnitude of the first.
pub fn output_deviation<T: Real>(
    model: &Model,
    a: &ParamVector<T>,
    b: &ParamVector<T>,
    inputs: &Matrix<T>,
) -> Result<f64> {
    let la = autodiff::logits(model, a, inputs)?;
    let lb = autodiff::logits(model, b, inputs)?;
    let scale = la
        .as_slice()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
        .max(f64::MIN_POSITIVE);
    let diff = la
        .as_slice()
        .iter()
        .zip(lb.as_slice())
        .fold(0.0f64, |m, (x, y)| m.max((x.as_f64() - y.as_f64()).abs()));
    Ok(diff / scale)
}

/// Self-describing model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub params: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "flatmin-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new<T: Real>(model: &Model, params: &ParamVector<T>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: model.layer_sizes().to_vec(),
            activations: model.activations().to_vec(),
            params: params.values().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn restore<T: Real>(&self) -> Result<(Model, ParamVector<T>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let model = Model::new(self.layer_sizes.clone(), self.activations.clone())?;
        let params = ParamVector::new(
            model.layout(),
            self.params.iter().map(|&v| T::lit(v)).collect(),
        )?;
        Ok((model, params))
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn build_is_deterministic() {
        let (_, a) = build_mlp::<f64>(&[2, 3, 2], 0).unwrap();
        let (_, b) = build_mlp::<f64>(&[2, 3, 2], 0).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_mlp::<f64>(&[2, 3, 2], 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count() {
        let (m, p) = build_mlp::<f64>(&[4, 8, 3], 0).unwrap();
        assert_eq!(m.num_params(), 67);
        assert_eq!(p.len(), 67);
    }

    #[test]
    fn he_variance() {
        let (m, p) = build_mlp::<f64>(&[256, 200, 2], 3).unwrap();
        let w = &p.values()[..256 * 200];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = 2.0 / 256.0;
        assert!(
            (var / expected - 1.0).abs() < 0.3,
            "variance {var} vs {expected}"
        );
        assert_eq!(m.num_layers(), 2);
    }

    #[test]
    fn empty_sizes_rejected() {
        assert!(matches!(build_mlp::<f64>(&[], 0), Err(Error::Config(_))));
        assert!(matches!(build_mlp::<f64>(&[3], 0), Err(Error::Config(_))));
        assert!(matches!(
            build_mlp::<f64>(&[3, 0, 2], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let m = Model::relu(vec![3, 4, 5]).unwrap();
        let p = ParamVector::<f64>::zeros(m.layout());
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 0.1]]).unwrap();
        let probs = predict_proba(&m, &p, &x).unwrap();
        assert!(probs.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn predict_matches_forward_exactly() {
        let (m, p) = build_mlp::<f64>(&[3, 7, 4], 9).unwrap();
        let mut s = rng::stream(1, &[]);
        let x = Matrix::from_vec(20, 3, rng::standard_normal_vec(&mut s, 60)).unwrap();
        let batch = crate::Batch::new(x.clone(), vec![0; 20], 4).unwrap();
        let probs = predict_proba(&m, &p, &x).unwrap();
        assert_eq!(
            probs,
            autodiff::forward(&m, &p, &batch).unwrap().per_example_probs
        );
        for i in 0..20 {
            assert_relative_eq!(probs.row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    fn imbalanced_2_2_2() -> (Model, ParamVector<f64>) {
        let m = Model::relu(vec![2, 2, 2]).unwrap();
        // filter 0 scaled by 10, filter 1 by 0.1
        let v = vec![
            10.0 * 0.6,
            10.0 * -0.3,
            0.1 * 0.2,
            0.1 * 0.9, // W1 rows
            10.0 * 0.1,
            0.1 * -0.05, // b1
            0.7,
            -0.4,
            0.3,
            0.8, // W2
            0.05,
            -0.02, // b2
        ];
        let p = ParamVector::new(m.layout(), v).unwrap();
        (m, p)
    }

    #[test]
    fn balance_preserves_function() {
        let (m, p) = imbalanced_2_2_2();
        let (b, report) = balance(&m, &p).unwrap();
        let mut s = rng::stream(5, &[]);
        let x = Matrix::from_vec(100, 2, rng::standard_normal_vec(&mut s, 200)).unwrap();
        let dev = output_deviation(&m, &p, &b, &x).unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
        assert!(report.max_output_deviation <= 1e-9);
        for n in &report.per_filter_norms_after[..2] {
            assert_relative_eq!(*n, 1.0, epsilon = 1e-9);
        }
        assert!((report.per_filter_norms_before[0] - 1.0).abs() > 1.0);
    }

    #[test]
    fn balanced_network_is_a_fixed_point() {
        let m = Model::relu(vec![2, 2, 2]).unwrap();
        let v = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.3, -0.2, 1.5, 0.4, 0.1, 0.2];
        let p = ParamVector::new(m.layout(), v).unwrap();
        let (b, report) = balance(&m, &p).unwrap();
        assert_eq!(b, p);
        assert_eq!(report.max_output_deviation, 0.0);
    }

    #[test]
    fn zero_filter_is_degenerate() {
        let (m, mut p) = imbalanced_2_2_2();
        for i in [2, 3, 5] {
            p.values_mut()[i] = 0.0;
        }
        assert_eq!(
            balance(&m, &p).unwrap_err(),
            Error::DegenerateFilter { layer: 0, unit: 1 }
        );
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, p) = build_mlp::<f64>(&[3, 4, 2], 2).unwrap();
        let mut buf = Vec::new();
        Checkpoint::new(&m, &p).write_to(&mut buf).unwrap();
        let (m2, p2) = Checkpoint::read_from(buf.as_slice())
            .unwrap()
            .restore::<f64>()
            .unwrap();
        assert_eq!(m, m2);
        assert_eq!(p, p2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn balance_invariants(seed in 0u64..1000, h1 in 1usize..6, h2 in 1usize..6, scale in -3.0f64..3.0) {
            let (m, mut p) = build_mlp::<f64>(&[3, h1, h2, 2], seed).unwrap();
            // break balance by scaling the first hidden layer by 10^scale
            let k = 10f64.powf(scale);
            let n1 = 3 * h1 + h1;
            p.values_mut()[..n1].iter_mut().for_each(|v| *v *= k);
            let (b, report) = balance(&m, &p).unwrap();
            prop_assert!(report.max_output_deviation <= 1e-9);
            let hidden = h1 + h2;
            for n in &report.per_filter_norms_after[..hidden] {
                prop_assert!((n - 1.0).abs() <= 1e-9);
            }
            let (bb, _) = balance(&m, &b).unwrap();
            for (x, y) in b.values().iter().zip(bb.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
