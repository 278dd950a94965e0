//! Parameter vectors, batches and exact derivatives of the softmax
//! cross-entropy loss of a dense ReLU network.
//!
//! Gradients come from a hand-written reverse pass. Hessian-vector products
//! use the R-operator (forward-over-reverse): the forward and backward passes
//! are differentiated once more along a direction `v`, which yields `H v`
//! exactly without ever forming `H`.

use std::borrow::Cow;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::models::{Activation, Model};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
}

/// One contiguous block of the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub role: Role,
    /// `(rows, cols)`; biases are `(units, 1)`.
    pub shape: (usize, usize),
    pub offset: usize,
    pub len: usize,
}

/// The parameters of one filter: for a dense layer, one output unit's incoming
/// weight row together with its bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSlice {
    pub layer: usize,
    pub unit: usize,
    pub ranges: Vec<Range<usize>>,
}

impl FilterSlice {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    filters: Vec<FilterSlice>,
    len: usize,
}

impl Layout {
    /// Validates that entries tile `0..len` in order and that filters
    /// partition every index exactly once.
    pub fn new(entries: Vec<LayoutEntry>, filters: Vec<FilterSlice>) -> Result<Self> {
        let mut offset = 0;
        for e in &entries {
            if e.offset != offset || e.len != e.shape.0 * e.shape.1 {
                return Err(Error::arch(format!(
                    "layout entry {e:?} is not contiguous with offset {offset}"
                )));
            }
            offset += e.len;
        }
        let mut seen = vec![false; offset];
        for f in &filters {
            for i in f.indices() {
                if i >= offset || seen[i] {
                    return Err(Error::arch(format!(
                        "filter ({}, {}) overlaps or overflows",
                        f.layer, f.unit
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::arch(format!("parameter {i} belongs to no filter")));
        }
        Ok(Layout {
            entries,
            filters,
            len: offset,
        })
    }

    /// Layout of a dense network with the given layer widths: for every layer,
    /// the `(out, in)` weight matrix row-major, then the bias.
    pub fn dense(layer_sizes: &[usize]) -> Self {
        let mut entries = Vec::new();
        let mut filters = Vec::new();
        let mut offset = 0;
        for (layer, w) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_off = offset;
            entries.push(LayoutEntry {
                layer,
                role: Role::Weight,
                shape: (fan_out, fan_in),
                offset,
                len: fan_in * fan_out,
            });
            offset += fan_in * fan_out;
            let b_off = offset;
            entries.push(LayoutEntry {
                layer,
                role: Role::Bias,
                shape: (fan_out, 1),
                offset,
                len: fan_out,
            });
            offset += fan_out;
            for unit in 0..fan_out {
                let row = w_off + unit * fan_in;
                filters.push(FilterSlice {
                    layer,
                    unit,
                    ranges: vec![row..row + fan_in, b_off + unit..b_off + unit + 1],
                });
            }
        }
        Layout {
            entries,
            filters,
            len: offset,
        }
    }

    /// A single weight block of `d` parameters forming one filter.
    pub fn flat(d: usize) -> Self {
        Layout {
            entries: vec![LayoutEntry {
                layer: 0,
                role: Role::Weight,
                shape: (1, d),
                offset: 0,
                len: d,
            }],
            filters: vec![FilterSlice {
                layer: 0,
                unit: 0,
                ranges: vec![0..d],
            }],
            len: d,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn filters(&self) -> &[FilterSlice] {
        &self.filters
    }
}

/// Flat parameter array together with its layer / filter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<T = f64> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Real> ParamVector<T> {
    pub fn new(layout: Arc<Layout>, values: Vec<T>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::arch(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is not finite")));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.len();
        ParamVector {
            values: vec![T::zero(); n],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![T::zero(); self.len()],
            layout: self.layout.clone(),
        }
    }

    /// Same layout, new values. Panics on length mismatch.
    pub fn with_values(&self, values: Vec<T>) -> Self {
        assert_eq!(values.len(), self.len(), "value count must match layout");
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::arch("parameter vectors have different layouts"))
        }
    }

    pub fn dot(&self, other: &Self) -> T {
        linalg::dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> T {
        linalg::norm(&self.values)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: T, x: &Self) {
        linalg::axpy(a, &x.values, &mut self.values);
    }

    pub fn scaled(&self, a: T) -> Self {
        self.with_values(self.values.iter().map(|&v| a * v).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a + b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_layout(other)?;
        Ok(self.with_values(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a - b)
                .collect(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn filter_norm(&self, filter: &FilterSlice) -> T {
        filter
            .indices()
            .map(|i| self.values[i] * self.values[i])
            .sum::<T>()
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Labeled examples: `n x d_in` inputs and integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T = f64> {
    inputs: Matrix<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Real> Batch<T> {
    pub fn new(inputs: Matrix<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::arch("batch must contain at least one example"));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::arch(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(i) = inputs.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("input entry {i} is not finite")));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::arch(format!(
                "label {y} of example {i} outside [0, {classes})"
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Matrix<T> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult<T = f64> {
    pub loss: T,
    pub per_example_probs: Matrix<T>,
}

/// Which examples of an objective's dataset a call evaluates.
#[derive(Debug, Clone, Copy)]
pub enum Examples<'a> {
    All,
    Subset(&'a [usize]),
}

/// A twice-differentiable mean loss over a fixed set of examples.
///
/// Networks ([`MlpObjective`]) and synthetic quadratic landscapes both
/// implement this, so optimizers and sharpness measures have one code path.
pub trait Objective<T: Real>: Sync {
    fn layout(&self) -> Arc<Layout>;

    fn num_examples(&self) -> usize;

    fn loss(&self, params: &ParamVector<T>, examples: Examples<'_>) -> Result<T>;

    fn loss_grad(
        &self,
        params: &ParamVector<T>,
        examples: Examples<'_>,
    ) -> Result<(T, ParamVector<T>)>;

    fn hvp(
        &self,
        params: &ParamVector<T>,
        v: &ParamVector<T>,
        examples: Examples<'_>,
    ) -> Result<ParamVector<T>>;
}

/// A network bound to a dataset.
#[derive(Debug, Clone, Copy)]
pub struct MlpObjective<'a, T = f64> {
    pub model: &'a Model,
    pub data: &'a Batch<T>,
}

impl<'a, T: Real> MlpObjective<'a, T> {
    pub fn new(model: &'a Model, data: &'a Batch<T>) -> Self {
        MlpObjective { model, data }
    }

    fn batch(&self, examples: Examples<'_>) -> Cow<'a, Batch<T>> {
        match examples {
            Examples::All => Cow::Borrowed(self.data),
            Examples::Subset(idx) => Cow::Owned(self.data.select(idx)),
        }
    }
}

impl<T: Real> Objective<T> for MlpObjective<'_, T> {
    fn layout(&self) -> Arc<Layout> {
        self.model.layout()
    }

    fn num_examples(&self) -> usize {
        self.data.len()
    }

    fn loss(&self, params: &ParamVector<T>, examples: Examples<'_>) -> Result<T> {
        Ok(forward(self.model, params, &self.batch(examples))?.loss)
    }

    fn loss_grad(
        &self,
        params: &ParamVector<T>,
        examples: Examples<'_>,
    ) -> Result<(T, ParamVector<T>)> {
        loss_and_grad(self.model, params, &self.batch(examples))
    }

    fn hvp(
        &self,
        params: &ParamVector<T>,
        v: &ParamVector<T>,
        examples: Examples<'_>,
    ) -> Result<ParamVector<T>> {
        hvp(self.model, params, &self.batch(examples), v)
    }
}

// ---------------------------------------------------------------------------
// dense network kernels

struct LayerView<'p, T> {
    w: &'p [T],
    b: &'p [T],
    fan_in: usize,
    fan_out: usize,
}

fn layer_views<'p, T: Real>(model: &Model, values: &'p [T]) -> Vec<LayerView<'p, T>> {
    let mut views = Vec::with_capacity(model.num_layers());
    let mut off = 0;
    for w in model.layer_sizes().windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let wlen = fan_in * fan_out;
        views.push(LayerView {
            w: &values[off..off + wlen],
            b: &values[off + wlen..off + wlen + fan_out],
            fan_in,
            fan_out,
        });
        off += wlen + fan_out;
    }
    views
}

fn check_compatible<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    inputs: &Matrix<T>,
) -> Result<()> {
    let expected = model.num_params();
    let layout = model.layout();
    if params.len() != expected
        || !(Arc::ptr_eq(params.layout(), &layout) || **params.layout() == *layout)
    {
        return Err(Error::arch(format!(
            "parameter layout ({} values) does not match model {:?} ({expected} parameters)",
            params.len(),
            model.layer_sizes()
        )));
    }
    if inputs.cols() != model.input_dim() {
        return Err(Error::arch(format!(
            "input width {} does not match model input {}",
            inputs.cols(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn check_labels<T: Real>(model: &Model, batch: &Batch<T>) -> Result<()> {
    if batch.classes() > model.num_classes() {
        return Err(Error::arch(format!(
            "batch has {} classes, model outputs {}",
            batch.classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// `out[i, j] = sum_k x[i, k] * w[j, k] + b[j]`
fn affine<T: Real>(x: &Matrix<T>, w: &[T], b: Option<&[T]>, fan_out: usize) -> Matrix<T> {
    let fan_in = x.cols();
    let mut out = Matrix::zeros(x.rows(), fan_out);
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for j in 0..fan_out {
            let mut acc = linalg::dot(xi, &w[j * fan_in..(j + 1) * fan_in]);
            if let Some(b) = b {
                acc += b[j];
            }
            oi[j] = acc;
        }
    }
    out
}

/// `out[i, k] = sum_j d[i, j] * w[j, k]`
fn backprop_input<T: Real>(d: &Matrix<T>, w: &[T], fan_in: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(d.rows(), fan_in);
    for i in 0..d.rows() {
        let di = d.row(i);
        let oi = out.row_mut(i);
        for (j, &dij) in di.iter().enumerate() {
            if dij != T::zero() {
                linalg::axpy(dij, &w[j * fan_in..(j + 1) * fan_in], oi);
            }
        }
    }
    out
}

/// Accumulates `gw[j, k] += sum_i d[i, j] * a[i, k]` and `gb[j] += sum_i d[i, j]`.
fn accumulate_weight_grad<T: Real>(
    d: &Matrix<T>,
    a: &Matrix<T>,
    gw: &mut [T],
    gb: Option<&mut [T]>,
) {
    let fan_in = a.cols();
    for i in 0..d.rows() {
        let ai = a.row(i);
        for (j, &dij) in d.row(i).iter().enumerate() {
            if dij != T::zero() {
                linalg::axpy(dij, ai, &mut gw[j * fan_in..(j + 1) * fan_in]);
            }
        }
    }
    if let Some(gb) = gb {
        for i in 0..d.rows() {
            for (g, &dij) in gb.iter_mut().zip(d.row(i)) {
                *g += dij;
            }
        }
    }
}

fn activate<T: Real>(z: &Matrix<T>, act: Activation) -> Matrix<T> {
    match act {
        Activation::Identity => z.clone(),
        Activation::Relu => z.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

/// Multiplies `m` in place by the activation derivative at `z`.
fn mask_derivative<T: Real>(m: &mut Matrix<T>, z: &Matrix<T>, act: Activation) {
    if act == Activation::Relu {
        for (mv, &zv) in m.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if zv <= T::zero() {
                *mv = T::zero();
            }
        }
    }
}

fn check_finite<T: Real>(m: &Matrix<T>, layer: usize, what: &str) -> Result<()> {
    if m.as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            layer,
            context: what.to_string(),
        })
    }
}

/// Inputs to every layer (`acts[0]` is the network input) and all
/// pre-activations (`pre[L-1]` holds the logits).
struct Tape<T> {
    acts: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
}

fn forward_tape<T: Real>(
    model: &Model,
    views: &[LayerView<'_, T>],
    inputs: &Matrix<T>,
) -> Result<Tape<T>> {
    let nl = views.len();
    let mut acts = Vec::with_capacity(nl);
    let mut pre = Vec::with_capacity(nl);
    acts.push(inputs.clone());
    for (l, v) in views.iter().enumerate() {
        let z = affine(&acts[l], v.w, Some(v.b), v.fan_out);
        check_finite(&z, l, "pre-activation")?;
        if l + 1 < nl {
            acts.push(activate(&z, model.activation(l)));
        }
        pre.push(z);
    }
    Ok(Tape { acts, pre })
}

/// Row-wise softmax and the mean negative log-likelihood of `labels`.
fn softmax_xent<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> (Matrix<T>, T) {
    let n = logits.rows();
    let mut probs = Matrix::zeros(n, logits.cols());
    let mut total = T::zero();
    for i in 0..n {
        let row = logits.row(i);
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let pr = probs.row_mut(i);
        let mut s = T::zero();
        for (p, &v) in pr.iter_mut().zip(row) {
            *p = (v - mx).exp();
            s += *p;
        }
        for p in pr.iter_mut() {
            *p /= s;
        }
        // -log softmax_y = logsumexp - logit_y
        total += mx + s.ln() - row[labels[i]];
    }
    (probs, total / T::lit(n as f64))
}

fn logits_and_loss<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    batch: &Batch<T>,
) -> Result<(Tape<T>, Matrix<T>, T)> {
    check_compatible(model, params, batch.inputs())?;
    check_labels(model, batch)?;
    let views = layer_views(model, params.values());
    let tape = forward_tape(model, &views, batch.inputs())?;
    let (probs, loss) = softmax_xent(tape.pre.last().expect("at least one layer"), batch.labels());
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: views.len() - 1,
            context: "cross-entropy loss".into(),
        });
    }
    Ok((tape, probs, loss))
}

/// Mean softmax cross-entropy of `batch` and the predicted class
/// probabilities.
pub fn forward<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    batch: &Batch<T>,
) -> Result<EvalResult<T>> {
    let (_, probs, loss) = logits_and_loss(model, params, batch)?;
    Ok(EvalResult {
        loss,
        per_example_probs: probs,
    })
}

/// Softmax probabilities for unlabeled inputs.
pub fn probabilities<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    inputs: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_compatible(model, params, inputs)?;
    let views = layer_views(model, params.values());
    let tape = forward_tape(model, &views, inputs)?;
    let labels = vec![0; inputs.rows()];
    Ok(softmax_xent(tape.pre.last().expect("at least one layer"), &labels).0)
}

/// Raw output logits.
pub fn logits<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    inputs: &Matrix<T>,
) -> Result<Matrix<T>> {
    check_compatible(model, params, inputs)?;
    let views = layer_views(model, params.values());
    let mut tape = forward_tape(model, &views, inputs)?;
    Ok(tape.pre.pop().expect("at least one layer"))
}

/// `(p - onehot(y)) / n`
fn output_delta<T: Real>(probs: &Matrix<T>, labels: &[usize]) -> Matrix<T> {
    let inv_n = T::one() / T::lit(labels.len() as f64);
    let mut d = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        d.row_mut(i)[y] -= T::one();
    }
    d.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);
    d
}

fn weight_slices<'g, T: Real>(model: &Model, g: &'g mut [T]) -> Vec<(&'g mut [T], &'g mut [T])> {
    let mut out = Vec::with_capacity(model.num_layers());
    let mut rest = g;
    for w in model.layer_sizes().windows(2) {
        let (wpart, tail) = rest.split_at_mut(w[0] * w[1]);
        let (bpart, tail) = tail.split_at_mut(w[1]);
        out.push((wpart, bpart));
        rest = tail;
    }
    out
}

/// Batch-mean loss and its gradient.
pub fn loss_and_grad<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    batch: &Batch<T>,
) -> Result<(T, ParamVector<T>)> {
    let (tape, probs, loss) = logits_and_loss(model, params, batch)?;
    let views = layer_views(model, params.values());
    let mut grad = vec![T::zero(); params.len()];
    {
        let mut slots = weight_slices(model, &mut grad);
        let mut delta = output_delta(&probs, batch.labels());
        for l in (0..views.len()).rev() {
            let (gw, gb) = &mut slots[l];
            accumulate_weight_grad(&delta, &tape.acts[l], gw, Some(gb));
            if l > 0 {
                let mut da = backprop_input(&delta, views[l].w, views[l].fan_in);
                mask_derivative(&mut da, &tape.pre[l - 1], model.activation(l - 1));
                check_finite(&da, l, "backpropagated error")?;
                delta = da;
            }
        }
    }
    let g = params.with_values(grad);
    if !g.is_finite() {
        return Err(Error::NonFinite {
            layer: 0,
            context: "gradient".into(),
        });
    }
    Ok((loss, g))
}

/// Gradient of the batch-mean loss.
pub fn grad<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    batch: &Batch<T>,
) -> Result<ParamVector<T>> {
    loss_and_grad(model, params, batch).map(|(_, g)| g)
}

/// Hessian-vector product `H v` of the batch-mean loss.
pub fn hvp<T: Real>(
    model: &Model,
    params: &ParamVector<T>,
    batch: &Batch<T>,
    v: &ParamVector<T>,
) -> Result<ParamVector<T>> {
    if !params.same_layout(v) {
        return Err(Error::arch(
            "direction vector layout differs from parameters",
        ));
    }
    let (tape, probs, _) = logits_and_loss(model, params, batch)?;
    let views = layer_views(model, params.values());
    let dirs = layer_views(model, v.values());
    let nl = views.len();
    let n = batch.len();

    // R-forward: directional derivatives of every layer input / pre-activation
    let mut r_acts: Vec<Option<Matrix<T>>> = Vec::with_capacity(nl);
    let mut r_pre: Vec<Matrix<T>> = Vec::with_capacity(nl);
    r_acts.push(None);
    for l in 0..nl {
        let mut rz = affine(&tape.acts[l], dirs[l].w, Some(dirs[l].b), views[l].fan_out);
        if let Some(ra) = &r_acts[l] {
            let extra = affine(ra, views[l].w, None, views[l].fan_out);
            linalg::axpy(T::one(), extra.as_slice(), rz.as_mut_slice());
        }
        check_finite(&rz, l, "R-forward")?;
        if l + 1 < nl {
            let mut ra = rz.clone();
            mask_derivative(&mut ra, &tape.pre[l], model.activation(l));
            r_acts.push(Some(ra));
        }
        r_pre.push(rz);
    }

    // R{delta_L} = R{p} / n with R{p} = p * (Rz - <p, Rz>)
    let inv_n = T::one() / T::lit(n as f64);
    let rz_out = &r_pre[nl - 1];
    let mut r_delta = Matrix::zeros(n, probs.cols());
    for i in 0..n {
        let p = probs.row(i);
        let rz = rz_out.row(i);
        let mean = linalg::dot(p, rz);
        for (o, (&pc, &rzc)) in r_delta.row_mut(i).iter_mut().zip(p.iter().zip(rz)) {
            *o = pc * (rzc - mean) * inv_n;
        }
    }
    let mut delta = output_delta(&probs, batch.labels());

    let mut out = vec![T::zero(); params.len()];
    {
        let mut slots = weight_slices(model, &mut out);
        for l in (0..nl).rev() {
            let (hw, hb) = &mut slots[l];
            accumulate_weight_grad(&r_delta, &tape.acts[l], hw, Some(hb));
            if let Some(ra) = &r_acts[l] {
                accumulate_weight_grad(&delta, ra, hw, None);
            }
            if l > 0 {
                let fan_in = views[l].fan_in;
                let mut r_da = backprop_input(&r_delta, views[l].w, fan_in);
                let extra = backprop_input(&delta, dirs[l].w, fan_in);
                linalg::axpy(T::one(), extra.as_slice(), r_da.as_mut_slice());
                mask_derivative(&mut r_da, &tape.pre[l - 1], model.activation(l - 1));
                check_finite(&r_da, l, "R-backward")?;
                let mut da = backprop_input(&delta, views[l].w, fan_in);
                mask_derivative(&mut da, &tape.pre[l - 1], model.activation(l - 1));
                delta = da;
                r_delta = r_da;
            }
        }
    }
    Ok(params.with_values(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_mlp;
    use crate::rng;
    use approx::assert_relative_eq;

    fn random_batch(n: usize, d: usize, classes: usize, seed: u64) -> Batch<f64> {
        let mut s = rng::stream(seed, &[99]);
        let x = rng::standard_normal_vec(&mut s, n * d);
        let labels = (0..n).map(|i| (i * 7 + seed as usize) % classes).collect();
        Batch::new(Matrix::from_vec(n, d, x).unwrap(), labels, classes).unwrap()
    }

    /// Scalar-by-scalar forward pass written independently of the batched kernels.
    fn naive_loss(model: &Model, p: &[f64], batch: &Batch<f64>) -> f64 {
        let sizes = model.layer_sizes();
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut a: Vec<f64> = batch.inputs().row(i).to_vec();
            let mut off = 0;
            for l in 0..sizes.len() - 1 {
                let (fi, fo) = (sizes[l], sizes[l + 1]);
                let mut z = vec![0.0; fo];
                for j in 0..fo {
                    let mut acc = p[off + fi * fo + j];
                    for k in 0..fi {
                        acc += p[off + j * fi + k] * a[k];
                    }
                    z[j] = acc;
                }
                off += fi * fo + fo;
                if l + 2 < sizes.len() && model.activation(l) == Activation::Relu {
                    z.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                a = z;
            }
            let denom: f64 = a.iter().map(|v| v.exp()).sum();
            total += -(a[batch.labels()[i]].exp() / denom).ln();
        }
        total / batch.len() as f64
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let model = Model::new(vec![3, 2], vec![]).unwrap();
        let params = ParamVector::<f64>::zeros(model.layout());
        let batch = random_batch(5, 3, 2, 1);
        let r = forward(&model, &params, &batch).unwrap();
        for i in 0..5 {
            assert_eq!(r.per_example_probs.row(i), &[0.5, 0.5]);
        }
        assert_relative_eq!(r.loss, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn confident_correct_logits_have_tiny_loss() {
        // identity-logit model: W = 20 * I, b = 0
        let model = Model::new(vec![2, 2], vec![]).unwrap();
        let params =
            ParamVector::new(model.layout(), vec![20.0, 0.0, 0.0, 20.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
        )
        .unwrap();
        let loss = forward(&model, &params, &batch).unwrap().loss;
        assert!(loss < 1e-8, "loss {loss}");
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let (model, params) = build_mlp(&[2, 8, 2], 11).unwrap();
        let batch = random_batch(16, 2, 2, 4);
        let r = forward(&model, &params, &batch).unwrap();
        assert_relative_eq!(
            r.loss,
            naive_loss(&model, params.values(), &batch),
            max_relative = 1e-13
        );
        for i in 0..16 {
            assert_relative_eq!(
                r.per_example_probs.row(i).iter().sum::<f64>(),
                1.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn balanced_zero_model_has_zero_bias_gradient() {
        let model = Model::new(vec![2, 2], vec![]).unwrap();
        let params = ParamVector::<f64>::zeros(model.layout());
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let batch = Batch::new(x, vec![0, 1], 2).unwrap();
        let g = grad(&model, &params, &batch).unwrap();
        assert_eq!(&g.values()[4..], &[0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (model, params) = build_mlp(&[3, 6, 5, 3], 2).unwrap();
        let batch = random_batch(12, 3, 3, 9);
        let g = grad(&model, &params, &batch).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p.values_mut()[i] += h;
            let up = naive_loss(&model, p.values(), &batch);
            p.values_mut()[i] -= 2.0 * h;
            let dn = naive_loss(&model, p.values(), &batch);
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - g.values()[i]).abs() / g.values()[i].abs().max(1e-3);
            assert!(err < 1e-4, "coordinate {i}: fd {fd} vs {}", g.values()[i]);
        }
    }

    #[test]
    fn hvp_matches_gradient_differences() {
        let (model, params) = build_mlp(&[3, 5, 3], 5).unwrap();
        let batch = random_batch(10, 3, 3, 2);
        let mut s = rng::stream(8, &[]);
        let v = params.with_values(rng::standard_normal_vec(&mut s, params.len()));
        let hv = hvp(&model, &params, &batch, &v).unwrap();
        let h = 1e-4;
        let mut plus = params.clone();
        plus.axpy(h, &v);
        let mut minus = params.clone();
        minus.axpy(-h, &v);
        let gp = grad(&model, &plus, &batch).unwrap();
        let gm = grad(&model, &minus, &batch).unwrap();
        let scale = hv.norm();
        for i in 0..params.len() {
            let fd = (gp.values()[i] - gm.values()[i]) / (2.0 * h);
            assert!(
                (fd - hv.values()[i]).abs() <= 1e-3 * scale.max(1e-8),
                "coordinate {i}"
            );
        }
    }

    #[test]
    fn hvp_of_zero_direction_is_zero() {
        let (model, params) = build_mlp(&[2, 4, 2], 0).unwrap();
        let batch = random_batch(6, 2, 2, 0);
        let hv = hvp(&model, &params, &batch, &params.zeros_like()).unwrap();
        assert!(hv.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layout_mismatch_is_an_architecture_error() {
        let (model, _) = build_mlp::<f64>(&[2, 4, 2], 0).unwrap();
        let (_, other) = build_mlp(&[2, 3, 2], 0).unwrap();
        let batch = random_batch(3, 2, 2, 0);
        assert!(matches!(
            forward(&model, &other, &batch),
            Err(Error::Architecture(_))
        ));
        let wide = random_batch(3, 5, 2, 0);
        let (_, p) = build_mlp(&[2, 4, 2], 0).unwrap();
        assert!(matches!(
            forward(&model, &p, &wide),
            Err(Error::Architecture(_))
        ));
    }

    #[test]
    fn overflow_reports_layer() {
        let (model, mut params) = build_mlp(&[2, 3, 2], 0).unwrap();
        params.values_mut()[0] = f64::MAX;
        let x = Matrix::from_rows(&[vec![1e10, 1e10]]).unwrap();
        let batch = Batch::new(x, vec![0], 2).unwrap();
        match forward(&model, &params, &batch) {
            Err(Error::NonFinite { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn layout_validation() {
        let l = Layout::dense(&[4, 8, 3]);
        assert_eq!(l.len(), 67);
        assert_eq!(l.filters().len(), 11);
        assert!(Layout::new(l.entries().to_vec(), l.filters().to_vec()).is_ok());
        let mut bad = l.filters().to_vec();
        bad.pop();
        assert!(Layout::new(l.entries().to_vec(), bad).is_err());
    }
}
