//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Batches are stored as `(examples, features)` matrices. A layer's weight
//! has shape `(output_dim, input_dim)`, so the pre-activation of a batch is
//! `X Wᵀ + b`.
//!
//! Besides the usual parameter gradients this module computes the gradient
//! of a scalar network output with respect to its *input*, and the parameter
//! gradient of a penalty on that input-gradient norm (the critic's gradient
//! penalty). Networks that admit the penalty are piecewise linear (linear,
//! ReLU, leaky ReLU), so their second derivatives vanish almost everywhere
//! and the penalty gradient reduces to one extra tangent pass through the
//! linearized network.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Slope used for leaky ReLU layers unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Probabilities below this value are floored before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu { slope: f64 },
    Softmax,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    fn is_piecewise_linear(self) -> bool {
        !matches!(self, Activation::Softmax)
    }

    /// Derivative of an elementwise activation. The kink at 0 takes
    /// subgradient 1.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if pre >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if pre >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Softmax => unreachable!("softmax has no elementwise derivative"),
        }
    }

    fn apply(self, pre: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => pre.clone(),
            Activation::Relu => pre.mapv(|v| v.max(0.0)),
            Activation::LeakyRelu { slope } => pre.mapv(|v| if v >= 0.0 { v } else { slope * v }),
            Activation::Softmax => softmax_rows(pre.view()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }
}

/// Check that a list of layer specs forms a valid network.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("a network needs at least one layer".into()));
    }
    for (i, spec) in specs.iter().enumerate() {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
        if let Activation::LeakyRelu { slope } = spec.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!(
                    "layer {i}: leaky ReLU slope {slope} outside (0, 1)"
                )));
            }
        }
        if spec.activation == Activation::Softmax && i + 1 != specs.len() {
            return Err(Error::Config(format!(
                "layer {i}: softmax is only allowed as the final layer"
            )));
        }
        if let Some(next) = specs.get(i + 1) {
            if next.input_dim != spec.output_dim {
                return Err(Error::Config(format!(
                    "layer {} expects input {} but layer {i} outputs {}",
                    i + 1,
                    next.input_dim,
                    spec.output_dim
                )));
            }
        }
    }
    Ok(())
}

/// Weights and bias of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of a dense network. Also used as the container for
/// parameter gradients and optimizer moments, which share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub layers: Vec<Dense>,
}

impl ParamBundle {
    pub fn zeros(specs: &[LayerSpec]) -> Self {
        let layers = specs
            .iter()
            .map(|s| Dense {
                weight: Array2::zeros((s.output_dim, s.input_dim)),
                bias: Array1::zeros(s.output_dim),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                weight: Array2::zeros(l.weight.raw_dim()),
                bias: Array1::zeros(l.bias.raw_dim()),
            })
            .collect();
        Self { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &ParamBundle) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.dim() == b.weight.dim() && a.bias.dim() == b.bias.dim())
    }

    /// Index of the first layer holding a non-finite entry.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            l.weight.iter().any(|v| !v.is_finite()) || l.bias.iter().any(|v| !v.is_finite())
        })
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn add_scaled(&mut self, other: &ParamBundle, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(factor, &b.weight);
            a.bias.scaled_add(factor, &b.bias);
        }
    }

    /// Values in a fixed order: per layer, the weight row-major then the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Overwrite from the ordering produced by [`ParamBundle::to_flat`].
    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = *it.next().expect("flat vector too short");
            }
            for b in l.bias.iter_mut() {
                *b = *it.next().expect("flat vector too short");
            }
        }
    }

    /// Order-sensitive checksum of the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        self.to_flat().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(specs: &[LayerSpec], seed: u64) -> Result<ParamBundle> {
    validate_specs(specs)?;
    let mut rng = rng::stream_rng(seed, rng::stream::INIT);
    let layers = specs
        .iter()
        .map(|s| {
            let limit = (6.0 / (s.input_dim + s.output_dim) as f64).sqrt();
            let weight =
                Array2::from_shape_fn((s.output_dim, s.input_dim), |_| rng.random_range(-limit..limit));
            Dense {
                weight,
                bias: Array1::zeros(s.output_dim),
            }
        })
        .collect();
    Ok(ParamBundle { layers })
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, `activations[l + 1]` the output of layer `l`.
    pub activations: Vec<Array2<f64>>,
    /// Pre-activation of every layer.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the input at least")
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: ParamBundle,
    /// Gradient with respect to the input batch.
    pub input: Array2<f64>,
}

/// A dense network: layer specs plus their parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    specs: Vec<LayerSpec>,
    pub params: ParamBundle,
}

impl Mlp {
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let params = init_params(&specs, seed)?;
        Ok(Self { specs, params })
    }

    pub fn from_parts(specs: Vec<LayerSpec>, params: ParamBundle) -> Result<Self> {
        validate_specs(&specs)?;
        if !params.same_shape(&ParamBundle::zeros(&specs)) {
            return Err(Error::Shape(
                "parameter shapes do not match the layer specs".into(),
            ));
        }
        Ok(Self { specs, params })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].output_dim
    }

    fn check_width(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch width {} does not match network input {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardCache> {
        self.check_width(&batch)?;
        let mut activations = Vec::with_capacity(self.specs.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.specs.len());
        activations.push(batch.to_owned());
        for (spec, layer) in self.specs.iter().zip(&self.params.layers) {
            let input = activations.last().expect("non-empty");
            let pre = input.dot(&layer.weight.t()) + &layer.bias;
            activations.push(spec.activation.apply(&pre));
            pre_activations.push(pre);
        }
        Ok(ForwardCache {
            activations,
            pre_activations,
        })
    }

    /// Network output without keeping intermediate activations.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&batch)?;
        let mut h = batch.to_owned();
        for (spec, layer) in self.specs.iter().zip(&self.params.layers) {
            let pre = h.dot(&layer.weight.t()) + &layer.bias;
            h = spec.activation.apply(&pre);
        }
        Ok(h)
    }

    /// Backpropagate a loss gradient given at the network output.
    pub fn backprop(&self, cache: &ForwardCache, grad_output: ArrayView2<f64>) -> Result<Backward> {
        self.check_grad(cache, &grad_output)?;
        let last = self.specs.len() - 1;
        let grad_pre = match self.specs[last].activation {
            Activation::Softmax => softmax_backward(cache.output().view(), grad_output),
            act => {
                let mut g = grad_output.to_owned();
                Zip::from(&mut g)
                    .and(&cache.pre_activations[last])
                    .for_each(|g, &a| *g *= act.derivative(a));
                g
            }
        };
        Ok(self.backprop_from_pre(cache, grad_pre))
    }

    /// Backpropagate a gradient given at the final layer's pre-activation
    /// (the logits, for a softmax network).
    pub fn backprop_logits(
        &self,
        cache: &ForwardCache,
        grad_logits: ArrayView2<f64>,
    ) -> Result<Backward> {
        self.check_grad(cache, &grad_logits)?;
        Ok(self.backprop_from_pre(cache, grad_logits.to_owned()))
    }

    fn check_grad(&self, cache: &ForwardCache, grad: &ArrayView2<f64>) -> Result<()> {
        if cache.pre_activations.len() != self.specs.len() {
            return Err(Error::Shape("cache was not produced by this network".into()));
        }
        if grad.dim() != cache.output().dim() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                grad.dim(),
                cache.output().dim()
            )));
        }
        Ok(())
    }

    fn backprop_from_pre(&self, cache: &ForwardCache, mut grad_pre: Array2<f64>) -> Backward {
        let mut grads = self.params.zeros_like();
        for l in (0..self.specs.len()).rev() {
            let layer = &self.params.layers[l];
            grads.layers[l].weight = grad_pre.t().dot(&cache.activations[l]);
            grads.layers[l].bias = grad_pre.sum_axis(Axis(0));
            let mut grad_in = grad_pre.dot(&layer.weight);
            if l > 0 {
                let act = self.specs[l - 1].activation;
                Zip::from(&mut grad_in)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|g, &a| *g *= act.derivative(a));
            }
            grad_pre = grad_in;
        }
        Backward {
            params: grads,
            input: grad_pre,
        }
    }

    fn check_scalar_critic(&self) -> Result<()> {
        let last = self.specs[self.specs.len() - 1];
        if last.output_dim != 1 || last.activation != Activation::Linear {
            return Err(Error::Config(
                "critic must end in a scalar linear output".into(),
            ));
        }
        if let Some(i) = self.specs.iter().position(|s| !s.activation.is_piecewise_linear()) {
            return Err(Error::Config(format!(
                "critic layer {i} uses softmax; the gradient penalty needs piecewise-linear activations"
            )));
        }
        Ok(())
    }

    /// Gradient of the scalar output with respect to the input, one row per
    /// example. Returns the cache and the per-layer `∂D/∂pre` matrices too.
    fn input_gradient_pass(
        &self,
        batch: ArrayView2<f64>,
    ) -> Result<(ForwardCache, Vec<Array2<f64>>, Array2<f64>)> {
        self.check_scalar_critic()?;
        let cache = self.forward(batch)?;
        let n = batch.nrows();
        let depth = self.specs.len();
        let mut grad_pre: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); depth];
        let mut g = Array2::<f64>::ones((n, 1));
        for l in (0..depth).rev() {
            let grad_in = g.dot(&self.params.layers[l].weight);
            grad_pre[l] = g;
            if l == 0 {
                return Ok((cache, grad_pre, grad_in));
            }
            let act = self.specs[l - 1].activation;
            let mut next = grad_in;
            Zip::from(&mut next)
                .and(&cache.pre_activations[l - 1])
                .for_each(|v, &a| *v *= act.derivative(a));
            g = next;
        }
        unreachable!("loop returns at layer 0")
    }

    /// `∇ₓ D(x)` for a batch of inputs of a scalar critic.
    pub fn input_gradients(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.input_gradient_pass(batch)?.2)
    }

    /// Gradient penalty `mean((‖∇ D‖₂ − target)²)` and its gradient with
    /// respect to the critic parameters.
    ///
    /// The norm is taken over the first `penalized_dims` input columns; any
    /// remaining columns (the conditioning vector) are held fixed.
    pub fn gradient_penalty(
        &self,
        batch: ArrayView2<f64>,
        penalized_dims: usize,
        target_norm: f64,
    ) -> Result<GradientPenalty> {
        if penalized_dims == 0 || penalized_dims > self.input_dim() {
            return Err(Error::Shape(format!(
                "cannot penalize {penalized_dims} of {} input dims",
                self.input_dim()
            )));
        }
        let n = batch.nrows();
        if n == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let (cache, grad_pre, input_grad) = self.input_gradient_pass(batch)?;
        let penal = input_grad.slice(s![.., ..penalized_dims]);
        let norms: Vec<f64> = penal
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let penalty = norms.iter().map(|&v| (v - target_norm).powi(2)).sum::<f64>() / n as f64;

        // Tangent seed: ∂penalty/∂(input gradient), zero on the condition columns.
        let mut tangent = Array2::<f64>::zeros(input_grad.raw_dim());
        for (i, &norm) in norms.iter().enumerate() {
            if norm > 0.0 {
                let coef = 2.0 * (norm - target_norm) / (n as f64 * norm);
                tangent
                    .slice_mut(s![i, ..penalized_dims])
                    .assign(&(&penal.row(i) * coef));
            }
        }

        let mut grads = self.params.zeros_like();
        for l in 0..self.specs.len() {
            grads.layers[l].weight = grad_pre[l].t().dot(&tangent);
            if l + 1 < self.specs.len() {
                let mut next = tangent.dot(&self.params.layers[l].weight.t());
                let act = self.specs[l].activation;
                Zip::from(&mut next)
                    .and(&cache.pre_activations[l])
                    .for_each(|v, &a| *v *= act.derivative(a));
                tangent = next;
            }
        }
        Ok(GradientPenalty {
            penalty,
            norms,
            params: grads,
        })
    }
}

/// Output of [`Mlp::gradient_penalty`].
#[derive(Debug, Clone)]
pub struct GradientPenalty {
    pub penalty: f64,
    /// Per-example `‖∇ D‖₂` over the penalized columns.
    pub norms: Vec<f64>,
    pub params: ParamBundle,
}

/// Exact gradient of a scalar critic's output at one point.
///
/// The returned vector covers the full critic input: the point followed by
/// the condition.
pub fn input_gradient(critic: &Mlp, point: &[f64], condition: &[f64]) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(point.len() + condition.len());
    row.extend_from_slice(point);
    row.extend_from_slice(condition);
    let batch = ArrayView2::from_shape((1, row.len()), &row)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(critic.input_gradients(batch)?.row(0).to_vec())
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn softmax_backward(probs: ArrayView2<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(grad.rows()).zip(out.rows_mut()) {
        let dot = p.dot(&g);
        Zip::from(&mut o)
            .and(&p)
            .and(&g)
            .for_each(|o, &p, &g| *o = p * (g - dot));
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A predicted label distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities(Vec<f64>);

impl ClassProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Input("empty probability vector".into()));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("probability outside [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("probabilities sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(ArrayView1::from(&self.0[..]))
    }
}

/// `−log p[label]` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &ClassProbabilities, label: usize) -> Result<f64> {
    let p = probs.0.get(label).ok_or_else(|| {
        Error::Input(format!(
            "label {label} out of range for {} classes",
            probs.0.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Mean floored cross-entropy of a probability batch against hard labels.
pub fn mean_cross_entropy(probs: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of `scale · mean CE` with respect to the logits: `scale (p − onehot) / n`.
///
/// This is the gradient of the unfloored loss; the two agree wherever the
/// true-class probability exceeds the floor.
pub fn cross_entropy_logit_grad(
    probs: ArrayView2<f64>,
    labels: &[usize],
    scale: f64,
) -> Result<Array2<f64>> {
    check_labels(probs, labels)?;
    let mut g = probs.to_owned();
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= 1.0;
    }
    if !labels.is_empty() {
        g *= scale / labels.len() as f64;
    }
    Ok(g)
}

/// Mean cross-entropy against soft targets, `−Σ q log p`.
pub fn mean_soft_cross_entropy(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    if probs.dim() != targets.dim() {
        return Err(Error::Shape("soft targets do not match probabilities".into()));
    }
    if probs.nrows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = Zip::from(&probs)
        .and(&targets)
        .fold(0.0, |acc, &p, &q| acc - q * p.max(PROB_FLOOR).ln());
    Ok(total / probs.nrows() as f64)
}

/// Gradient of `scale · mean soft CE` with respect to the logits.
pub fn soft_cross_entropy_logit_grad(
    probs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    if probs.dim() != targets.dim() {
        return Err(Error::Shape("soft targets do not match probabilities".into()));
    }
    let mut g = &probs - &targets;
    if probs.nrows() > 0 {
        g *= scale / probs.nrows() as f64;
    }
    Ok(g)
}

fn check_labels(probs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= probs.ncols()) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            probs.ncols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_gradcheck;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream_rng(seed, 99);
        Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0))
    }

    fn two_layer(seed: u64) -> Mlp {
        Mlp::new(
            vec![
                LayerSpec::new(5, 7, Activation::leaky()),
                LayerSpec::new(7, 3, Activation::Softmax),
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let specs = vec![
            LayerSpec::new(4, 3, Activation::Relu),
            LayerSpec::new(3, 2, Activation::Softmax),
        ];
        let a = init_params(&specs, 11).unwrap();
        let b = init_params(&specs, 11).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.layers[0].weight.dim(), (3, 4));
        assert_eq!(a.layers[0].bias.len(), 3);
        assert_eq!(a.layers[1].weight.dim(), (2, 3));
        assert_eq!(a.layers[1].bias.len(), 2);
        let limit = (6.0f64 / 7.0).sqrt();
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= limit));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn broken_chain_is_config_error() {
        let specs = vec![
            LayerSpec::new(4, 3, Activation::Linear),
            LayerSpec::new(5, 2, Activation::Linear),
        ];
        assert!(matches!(init_params(&specs, 0), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_must_be_last() {
        let specs = vec![
            LayerSpec::new(4, 3, Activation::Softmax),
            LayerSpec::new(3, 2, Activation::Linear),
        ];
        assert!(matches!(validate_specs(&specs), Err(Error::Config(_))));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = Mlp::new(vec![LayerSpec::new(3, 3, Activation::Linear)], 0).unwrap();
        net.params.layers[0].weight = Array2::eye(3);
        let x = array![[1.5, -2.0, 0.25]];
        assert_eq!(net.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn leaky_relu_and_softmax_values() {
        let pre = array![[-2.0, 3.0]];
        let out = Activation::LeakyRelu { slope: 0.2 }.apply(&pre);
        assert!((out[[0, 0]] + 0.4).abs() < 1e-15);
        assert_eq!(out[[0, 1]], 3.0);
        let p = softmax_rows(array![[0.0, 0.0, 0.0]].view());
        for v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let net = two_layer(1);
        let x = Array2::zeros((2, 4));
        assert!(matches!(net.forward(x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let one_hot = ClassProbabilities::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&one_hot, 1).unwrap(), 0.0);
        let uniform = ClassProbabilities::new(vec![0.125; 8]).unwrap();
        assert!((cross_entropy(&uniform, 5).unwrap() - 8f64.ln()).abs() < 1e-12);
        let floored = cross_entropy(&one_hot, 0).unwrap();
        assert!((floored + PROB_FLOOR.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&one_hot, 3), Err(Error::Input(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradient() {
        let net = two_layer(3);
        let x = random_batch(4, 5, 1);
        let cache = net.forward(x.view()).unwrap();
        let g = net
            .backprop(&cache, Array2::zeros((4, 3)).view())
            .unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_squared_error_matches_closed_form() {
        let net = Mlp::new(vec![LayerSpec::new(3, 2, Activation::Linear)], 5).unwrap();
        let x = array![[0.5, -1.0, 2.0]];
        let y = array![[1.0, -0.5]];
        let cache = net.forward(x.view()).unwrap();
        let resid = cache.output() - &y;
        let back = net.backprop(&cache, (&resid * 2.0).view()).unwrap();
        // 2(Wx + b − y) xᵀ
        let expected = (&resid * 2.0).t().dot(&x);
        for (a, e) in back.params.layers[0].weight.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = Mlp::new(
            vec![
                LayerSpec::new(6, 8, Activation::leaky()),
                LayerSpec::new(8, 4, Activation::Relu),
                LayerSpec::new(4, 3, Activation::Softmax),
            ],
            21,
        )
        .unwrap();
        let x = random_batch(5, 6, 2);
        let labels = [0usize, 2, 1, 1, 0];
        let loss = |p: &ParamBundle| {
            let m = Mlp::from_parts(net.specs().to_vec(), p.clone()).unwrap();
            mean_cross_entropy(m.predict(x.view()).unwrap().view(), &labels).unwrap()
        };
        let cache = net.forward(x.view()).unwrap();
        let out = cache.output();
        let mut g = Array2::zeros(out.raw_dim());
        for (i, &y) in labels.iter().enumerate() {
            g[[i, y]] = -1.0 / (out[[i, y]] * labels.len() as f64);
        }
        let analytic = net.backprop(&cache, g.view()).unwrap().params;
        let err = finite_diff_gradcheck(loss, &net.params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");

        let fused = net
            .backprop_logits(
                &cache,
                cross_entropy_logit_grad(out.view(), &labels, 1.0).unwrap().view(),
            )
            .unwrap()
            .params;
        let err = finite_diff_gradcheck(loss, &net.params, &fused, 1e-5).unwrap();
        assert!(err < 1e-5, "fused relative error {err}");
    }

    fn critic(seed: u64) -> Mlp {
        Mlp::new(
            vec![
                LayerSpec::new(5, 9, Activation::leaky()),
                LayerSpec::new(9, 7, Activation::leaky()),
                LayerSpec::new(7, 1, Activation::Linear),
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn linear_critic_input_gradient_is_weight() {
        let mut c = Mlp::new(vec![LayerSpec::new(3, 1, Activation::Linear)], 0).unwrap();
        c.params.layers[0].weight = array![[0.3, -1.2, 2.0]];
        c.params.layers[0].bias = array![0.7];
        let g = input_gradient(&c, &[5.0, 1.0], &[-3.0]).unwrap();
        assert_eq!(g, vec![0.3, -1.2, 2.0]);
    }

    #[test]
    fn dead_relu_critic_has_zero_input_gradient() {
        let mut c = Mlp::new(
            vec![
                LayerSpec::new(2, 3, Activation::Relu),
                LayerSpec::new(3, 1, Activation::Linear),
            ],
            0,
        )
        .unwrap();
        c.params.layers[0].bias = array![-10.0, -10.0, -10.0];
        let g = input_gradient(&c, &[0.5, 0.5], &[]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let c = critic(4);
        let x = random_batch(1, 5, 8);
        let g = c.input_gradients(x.view()).unwrap();
        let h = 1e-5;
        for j in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[[0, j]] += h;
            xm[[0, j]] -= h;
            let num = (c.predict(xp.view()).unwrap()[[0, 0]] - c.predict(xm.view()).unwrap()[[0, 0]])
                / (2.0 * h);
            let rel = (num - g[[0, j]]).abs() / num.abs().max(g[[0, j]].abs()).max(1e-8);
            assert!(rel < 1e-5, "dim {j}: {num} vs {}", g[[0, j]]);
        }
    }

    #[test]
    fn non_scalar_critic_is_rejected() {
        let c = two_layer(0);
        assert!(matches!(
            c.input_gradients(random_batch(1, 5, 0).view()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            c.gradient_penalty(random_batch(1, 5, 0).view(), 5, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let mut c = Mlp::new(vec![LayerSpec::new(2, 1, Activation::Linear)], 0).unwrap();
        c.params.layers[0].weight = array![[0.6, 0.8]];
        let gp = c.gradient_penalty(random_batch(4, 2, 1).view(), 2, 1.0).unwrap();
        assert!(gp.penalty.abs() < 1e-15);
        assert!(gp.params.to_flat().iter().all(|v| v.abs() < 1e-15));

        c.params.layers[0].weight = array![[3.0, 4.0]];
        let gp = c.gradient_penalty(random_batch(4, 2, 1).view(), 2, 1.0).unwrap();
        assert!((gp.penalty - 16.0).abs() < 1e-12);
        // d/dw (‖w‖ − 1)² = 2(‖w‖ − 1) w/‖w‖ = 8 · (0.6, 0.8)
        let w = &gp.params.layers[0].weight;
        assert!((w[[0, 0]] - 4.8).abs() < 1e-12 && (w[[0, 1]] - 6.4).abs() < 1e-12);
        assert_eq!(gp.params.layers[0].bias[0], 0.0);
    }

    #[test]
    fn gradient_penalty_matches_finite_differences() {
        for seed in 0..4 {
            let c = critic(seed);
            let x = random_batch(6, 5, seed + 10);
            let analytic = c.gradient_penalty(x.view(), 3, 1.0).unwrap().params;
            let loss = |p: &ParamBundle| {
                let m = Mlp::from_parts(c.specs().to_vec(), p.clone()).unwrap();
                m.gradient_penalty(x.view(), 3, 1.0).unwrap().penalty
            };
            let err = finite_diff_gradcheck(loss, &c.params, &analytic, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![2.0, 0.5, 0.1].view()), 0);
    }

    #[test]
    fn forward_is_bitwise_pure() {
        let net = two_layer(9);
        let x = random_batch(3, 5, 4);
        assert_eq!(net.predict(x.view()).unwrap(), net.predict(x.view()).unwrap());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let n = v.len();
            let p = softmax_rows(Array2::from_shape_vec((1, n), v).unwrap().view());
            prop_assert!(ClassProbabilities::new(p.row(0).to_vec()).is_ok());
        }

        #[test]
        fn argmax_invariant_to_shift_and_scale(
            v in prop::collection::vec(-10.0f64..10.0, 2..10),
            shift in -100.0f64..100.0,
            scale in 0.01f64..100.0,
        ) {
            let n = v.len();
            let base = softmax_rows(Array2::from_shape_vec((1, n), v.clone()).unwrap().view());
            let moved: Vec<f64> = v.iter().map(|x| x * scale + shift).collect();
            let moved = softmax_rows(Array2::from_shape_vec((1, n), moved).unwrap().view());
            let a = argmax(base.row(0));
            let b = argmax(moved.row(0));
            // Near-ties can be reordered by rounding; only compare clear winners.
            prop_assume!(v.iter().enumerate().all(|(i, &x)| i == a || x < v[a] - 1e-3));
            prop_assert_eq!(a, b);
        }

        #[test]
        fn cross_entropy_non_negative(v in prop::collection::vec(-20.0f64..20.0, 2..8), pick in 0usize..8) {
            let n = v.len();
            let p = softmax_rows(Array2::from_shape_vec((1, n), v).unwrap().view());
            let probs = ClassProbabilities::new(p.row(0).to_vec()).unwrap();
            prop_assert!(cross_entropy(&probs, pick % n).unwrap() >= 0.0);
        }
    }
}
