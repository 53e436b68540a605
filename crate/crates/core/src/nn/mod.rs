//! Multilayer perceptron with hand-written backpropagation.
//!
//! Parameters live in one flat vector so they can be averaged, compared and
//! shipped between clients and server without caring about layer structure.
//! Layer `l` occupies `fan_in * fan_out` weights (row-major, `fan_in` rows)
//! followed by `fan_out` biases; layers are stored in order.

mod optim;

pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

use std::ops::Range;

use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng;
use crate::{Error, Result};

/// Width of the last hidden layer used for mean latent representations.
pub const DEFAULT_LATENT_DIM: usize = 128;

/// Nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed in terms of the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Position of one linear layer inside a [`ParameterVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerLayout {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    /// Weights and biases together.
    pub fn range(&self) -> Range<usize> {
        self.offset..self.biases().end
    }
}

/// Architecture of a feed-forward classifier: `[input, hidden.., classes]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl ModelSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "need input, at least one hidden layer and output; got {} sizes",
                layer_sizes.len()
            )));
        }
        if let Some(i) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidSpec(format!("layer {i} has size 0")));
        }
        if layer_sizes[layer_sizes.len() - 1] < 2 {
            return Err(Error::InvalidSpec("need at least two output classes".into()));
        }
        Ok(Self { layer_sizes, activation })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    /// Width of the last hidden layer.
    pub fn latent_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    /// Number of linear layers.
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerLayout> + '_ {
        self.layer_sizes.windows(2).scan(0, |offset, w| {
            let layout = LayerLayout { fan_in: w[0], fan_out: w[1], offset: *offset };
            *offset += w[0] * w[1] + w[1];
            Some(layout)
        })
    }

    pub fn layer(&self, index: usize) -> Option<LayerLayout> {
        self.layers().nth(index)
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat model parameters conforming to a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    spec: ModelSpec,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "spec expects {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if !math::all_finite(&values) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { spec, values })
    }

    pub fn zeros(spec: ModelSpec) -> Self {
        let values = vec![0.0; spec.param_count()];
        Self { spec, values }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = self.spec.layer(layer).expect("layer index out of range");
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.values[l.weights()]).unwrap()
    }

    pub fn biases(&self, layer: usize) -> ArrayView1<'_, f64> {
        let l = self.spec.layer(layer).expect("layer index out of range");
        ArrayView1::from(&self.values[l.biases()])
    }

    pub(crate) fn same_layout(&self, other: &ParameterVector) -> bool {
        self.spec == other.spec
    }
}

/// Gradient with the same layout as a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for GradientVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Borrowed rows of features with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    inputs: ArrayView2<'a, f64>,
    labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyDataset("batch has no rows".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} input rows but {} labels", inputs.nrows(), labels.len())));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> ArrayView2<'a, f64> {
        self.inputs
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// FedProx proximal term `(mu / 2) * |w - anchor|^2`.
#[derive(Debug, Clone, Copy)]
pub struct Prox<'a> {
    pub mu: f64,
    pub anchor: &'a ParameterVector,
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Linear head output, `N x classes`.
    pub logits: Array2<f64>,
    /// Post-activation values of the last hidden layer, `N x latent_dim`.
    pub latent: Array2<f64>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = rng::rng_from(seed);
    let mut values = vec![0.0; spec.param_count()];
    for layer in spec.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        for w in &mut values[layer.weights()] {
            *w = dist.sample(&mut rng);
        }
    }
    ParameterVector { spec: spec.clone(), values }
}

fn check_inputs(spec: &ModelSpec, inputs: &ArrayView2<'_, f64>) -> Result<()> {
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} input features, batch has {}",
            spec.input_dim(),
            inputs.ncols()
        )));
    }
    Ok(())
}

/// Outputs of every layer: hidden activations followed by the logits.
fn layer_outputs(params: &ParameterVector, inputs: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
    let spec = params.spec();
    let act = spec.activation();
    let last = spec.layer_count() - 1;
    let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(spec.layer_count());
    for l in 0..spec.layer_count() {
        let input = match outputs.last() {
            Some(prev) => prev.view(),
            None => inputs,
        };
        let mut z = input.dot(&params.weights(l));
        z += &params.biases(l);
        if l != last {
            z.mapv_inplace(|v| act.apply(v));
        }
        outputs.push(z);
    }
    outputs
}

pub fn forward(params: &ParameterVector, inputs: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
    check_inputs(params.spec(), &inputs)?;
    let mut outputs = layer_outputs(params, inputs);
    let logits = outputs.pop().expect("at least two layers");
    let latent = outputs.pop().expect("at least one hidden layer");
    Ok(ForwardOutput { logits, latent })
}

/// Row-wise softmax of the logits.
pub fn class_probabilities(params: &ParameterVector, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut logits = forward(params, inputs)?.logits;
    for mut row in logits.rows_mut() {
        let src = row.to_vec();
        math::softmax_into(&src, row.as_slice_mut().expect("standard layout"));
    }
    Ok(logits)
}

/// Mean cross-entropy (plus optional proximal term) and its exact gradient.
pub fn loss_and_grad(
    params: &ParameterVector,
    batch: &Batch<'_>,
    prox: Option<Prox<'_>>,
) -> Result<(f64, GradientVector)> {
    let spec = params.spec();
    check_inputs(spec, &batch.inputs)?;
    let classes = spec.class_count();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
    }
    if let Some(p) = &prox {
        if p.mu < 0.0 || !p.mu.is_finite() {
            return Err(Error::InvalidArgument(format!("proximal mu must be finite and >= 0, got {}", p.mu)));
        }
        if !p.anchor.same_layout(params) {
            return Err(Error::DimensionMismatch("proximal anchor layout differs from parameters".into()));
        }
    }

    let n = batch.len() as f64;
    let mut outputs = layer_outputs(params, batch.inputs);

    // Turn the logits into dL/dlogits in place: (softmax - onehot) / N.
    let mut loss = 0.0;
    let mut delta = outputs.pop().expect("logits");
    for (mut row, &label) in delta.rows_mut().into_iter().zip(batch.labels) {
        let logits = row.as_slice_mut().expect("standard layout");
        loss += math::log_sum_exp(logits) - logits[label];
        let src = logits.to_vec();
        math::softmax_into(&src, logits);
        logits[label] -= 1.0;
        for g in logits.iter_mut() {
            *g /= n;
        }
    }
    loss /= n;

    let mut grad = vec![0.0; params.len()];
    let act = spec.activation();
    for l in (0..spec.layer_count()).rev() {
        let layout = spec.layer(l).expect("layer");
        let input = if l == 0 { batch.inputs } else { outputs[l - 1].view() };
        {
            let mut gw = ArrayViewMut2::from_shape((layout.fan_in, layout.fan_out), &mut grad[layout.weights()])
                .expect("layout");
            general_mat_mul(1.0, &input.t(), &delta, 0.0, &mut gw);
        }
        let gb: Array1<f64> = delta.sum_axis(Axis(0));
        grad[layout.biases()].copy_from_slice(gb.as_slice().expect("contiguous"));
        if l > 0 {
            let mut next = delta.dot(&params.weights(l).t());
            next.zip_mut_with(&outputs[l - 1], |d, &y| *d *= act.derivative_at_output(y));
            delta = next;
        }
    }

    if let Some(p) = prox.filter(|p| p.mu > 0.0) {
        let mut sq = 0.0;
        for ((g, &w), &a) in grad.iter_mut().zip(&params.values).zip(&p.anchor.values) {
            let d = w - a;
            sq += d * d;
            *g += p.mu * d;
        }
        loss += 0.5 * p.mu * sq;
    }

    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}")));
    }
    if !math::all_finite(&grad) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((loss, GradientVector(grad)))
}

/// Mean of the last hidden layer's activations over all rows of `inputs`.
pub fn mean_latent(params: &ParameterVector, inputs: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    check_inputs(params.spec(), &inputs)?;
    if inputs.nrows() == 0 {
        return Err(Error::EmptyDataset("cannot average latents of zero samples".into()));
    }
    const CHUNK: usize = 512;
    let mut sum = Array1::<f64>::zeros(params.spec().latent_dim());
    for chunk in inputs.axis_chunks_iter(Axis(0), CHUNK) {
        let latent = forward(params, chunk)?.latent;
        sum += &latent.sum_axis(Axis(0));
    }
    sum /= inputs.nrows() as f64;
    Ok(sum.to_vec())
}

/// Mean cross-entropy and top-1 accuracy over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(params: &ParameterVector, batch: &Batch<'_>) -> Result<Evaluation> {
    check_inputs(params.spec(), &batch.inputs)?;
    let logits = forward(params, batch.inputs)?.logits;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(batch.labels) {
        let row = row.as_slice().expect("standard layout");
        loss += math::log_sum_exp(row) - row[label];
        let predicted = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if predicted == label {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: correct as f64 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spec(sizes: &[usize]) -> ModelSpec {
        ModelSpec::new(sizes.to_vec(), Activation::Relu).unwrap()
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ModelSpec::new(vec![4, 3], Activation::Relu).is_err());
        assert!(ModelSpec::new(vec![4, 0, 3], Activation::Relu).is_err());
        assert!(ModelSpec::new(vec![4, 5, 1], Activation::Relu).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let s = spec(&[4, 128, 3]);
        let a = init_model(&s, 7);
        let b = init_model(&s, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 * 128 + 128 + 128 * 3 + 3);
        assert_eq!(a.len(), 1027);
        for l in s.layers() {
            assert!(a.values()[l.biases()].iter().all(|&b| b == 0.0));
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            assert!(a.values()[l.weights()].iter().all(|w| w.abs() <= limit));
        }
        assert_ne!(init_model(&s, 8), a);
    }

    #[test]
    fn zero_weights_forward() {
        for act in [Activation::Relu, Activation::Tanh] {
            let s = ModelSpec::new(vec![4, 128, 3], act).unwrap();
            let p = ParameterVector::zeros(s);
            let x = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 - 7.0);
            let out = forward(&p, x.view()).unwrap();
            assert_eq!(out.latent.dim(), (5, 128));
            assert_eq!(out.logits.dim(), (5, 3));
            assert!(out.logits.iter().all(|&v| v == 0.0));
            assert!(out.latent.iter().all(|&v| v == act.apply(0.0)));
        }
    }

    /// Spec [2,2,2] with hand-picked weights.
    fn hand_model() -> ParameterVector {
        let s = spec(&[2, 2, 2]);
        // W1 = [[1, -1], [2, 0.5]], b1 = [0.5, -1]
        // W2 = [[1, 0], [-1, 2]],   b2 = [0, 1]
        let values = vec![1.0, -1.0, 2.0, 0.5, 0.5, -1.0, 1.0, 0.0, -1.0, 2.0, 0.0, 1.0];
        ParameterVector::from_values(s, values).unwrap()
    }

    #[test]
    fn hand_computed_forward() {
        let p = hand_model();
        // x = (1, 2): z1 = (1 + 4 + 0.5, -1 + 1 - 1) = (5.5, -1) -> relu (5.5, 0)
        // logits = (5.5 * 1 + 0 * -1, 5.5 * 0 + 0 * 2) + (0, 1) = (5.5, 1)
        // x = (-1, 1): z1 = (-1 + 2 + 0.5, 1 + 0.5 - 1) = (1.5, 0.5)
        // logits = (1.5 - 0.5, 0 + 1) + (0, 1) = (1, 2)
        let x = array![[1.0, 2.0], [-1.0, 1.0]];
        let out = forward(&p, x.view()).unwrap();
        assert_eq!(out.latent, array![[5.5, 0.0], [1.5, 0.5]]);
        assert_eq!(out.logits, array![[5.5, 1.0], [1.0, 2.0]]);

        let z = mean_latent(&p, x.view()).unwrap();
        assert_eq!(z, vec![3.5, 0.25]);
    }

    #[test]
    fn mean_latent_single_and_duplicated() {
        let s = spec(&[3, 16, 4]);
        let p = init_model(&s, 3);
        let x = Array2::from_shape_fn((7, 3), |(i, j)| ((i * 3 + j) as f64).sin());
        let one = mean_latent(&p, x.slice(ndarray::s![2..3, ..])).unwrap();
        let row = forward(&p, x.slice(ndarray::s![2..3, ..])).unwrap().latent;
        assert_eq!(one, row.row(0).to_vec());

        let z = mean_latent(&p, x.view()).unwrap();
        let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let z2 = mean_latent(&p, doubled.view()).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(mean_latent(&p, x.slice(ndarray::s![0..0, ..])).is_err());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let s = spec(&[3, 8, 5]);
        let p = ParameterVector::zeros(s);
        let x = Array2::from_elem((4, 3), 0.3);
        let labels = [0, 1, 4, 2];
        let (loss, _) = loss_and_grad(&p, &Batch::new(x.view(), &labels).unwrap(), None).unwrap();
        assert_abs_diff_eq!(loss, 5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn prox_with_zero_mu_is_identity() {
        let s = spec(&[3, 5, 2]);
        let p = init_model(&s, 1);
        let anchor = init_model(&s, 2);
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64) - (j as f64) * 0.7);
        let labels = [0, 1, 1, 0];
        let b = Batch::new(x.view(), &labels).unwrap();
        let plain = loss_and_grad(&p, &b, None).unwrap();
        let prox = loss_and_grad(&p, &b, Some(Prox { mu: 0.0, anchor: &anchor })).unwrap();
        assert_eq!(plain.0.to_bits(), prox.0.to_bits());
        assert_eq!(plain.1, prox.1);

        let with = loss_and_grad(&p, &b, Some(Prox { mu: 0.3, anchor: &anchor })).unwrap();
        let sq: f64 = p.values().iter().zip(anchor.values()).map(|(a, b)| (a - b).powi(2)).sum();
        assert_abs_diff_eq!(with.0, plain.0 + 0.15 * sq, epsilon = 1e-12);
    }

    #[test]
    fn dimension_and_label_errors() {
        let p = init_model(&spec(&[3, 4, 2]), 0);
        let x = Array2::zeros((2, 4));
        assert!(matches!(forward(&p, x.view()), Err(Error::DimensionMismatch(_))));
        let x = Array2::zeros((2, 3));
        let labels = [0, 2];
        let b = Batch::new(x.view(), &labels).unwrap();
        assert!(loss_and_grad(&p, &b, None).is_err());
        assert!(Batch::new(x.view(), &[0]).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = init_model(&spec(&[3, 16, 7]), 4);
        let x = Array2::from_shape_fn((20, 3), |(i, j)| ((i + 2 * j) as f64 * 1.3).cos() * 10.0);
        let probs = class_probabilities(&p, x.view()).unwrap();
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn evaluate_counts_argmax() {
        let p = hand_model();
        let x = array![[1.0, 2.0], [-1.0, 1.0]];
        let e = evaluate(&p, &Batch::new(x.view(), &[0, 1]).unwrap()).unwrap();
        assert_eq!(e.accuracy, 1.0);
        let e = evaluate(&p, &Batch::new(x.view(), &[0, 0]).unwrap()).unwrap();
        assert_eq!(e.accuracy, 0.5);
    }
}
