//! A small fixed-topology feedforward network: dense layers, a handful of
//! nonlinearities, softmax losses, gradient reversal and Adam.
//!
//! Weights are stored `inputs × outputs` so a layer computes `x W + b` on a
//! row-major batch.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown loss `{0}`")]
    UnknownLoss(String),
    #[error("unknown activation `{0}`")]
    UnknownActivation(String),
    #[error("target {target} outside alphabet of size {classes}")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed network document: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Elu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    // Derivative expressed through the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "elu" => Ok(Activation::Elu),
            other => Err(NetError::UnknownActivation(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound));
        Dense {
            weights,
            bias,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

/// Network parameters `θ`: an ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Per-layer pre- and post-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub input: Array2<f64>,
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl Activations {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().unwrap_or(&self.input)
    }
}

/// Gradient blocks congruent with [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.raw_dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().chain(b.iter()).map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Network {
    /// Builds `widths[0] -> ... -> widths[last]` with `hidden` between layers
    /// and `output` on the last layer.
    pub fn new<R: Rng>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "a network needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::init(widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Network { layers }
    }

    /// Checks that adjacent widths agree and every parameter is finite.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, NetError> {
        if layers.is_empty() {
            return Err(NetError::Shape("network has no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.outputs() {
                return Err(NetError::Shape(format!("layer {i}: bias length {} != {}", l.bias.len(), l.outputs())));
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(NetError::Format(format!("layer {i} has non-finite parameters")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NetError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Network { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Activations, NetError> {
        if batch.ncols() != self.input_width() {
            return Err(NetError::Shape(format!(
                "batch width {} but network expects {}",
                batch.ncols(),
                self.input_width()
            )));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current = batch.to_owned();
        for layer in &self.layers {
            let z = current.dot(&layer.weights) + &layer.bias;
            let act = layer.activation;
            let out = z.mapv(|v| act.apply(v));
            pre.push(z);
            current = out.clone();
            post.push(out);
        }
        Ok(Activations {
            input: batch.to_owned(),
            pre,
            post,
        })
    }

    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>, NetError> {
        let mut acts = self.forward(batch)?;
        Ok(acts.post.pop().expect("network has at least one layer"))
    }

    /// Backpropagates `grad_output` (∂loss/∂output) through a recorded pass.
    /// Returns the parameter gradients and ∂loss/∂input.
    pub fn backward(&self, acts: &Activations, grad_output: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>), NetError> {
        if grad_output.dim() != acts.output().dim() {
            return Err(NetError::Shape(format!(
                "output gradient {:?} vs output {:?}",
                grad_output.dim(),
                acts.output().dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_output.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            if act != Activation::Identity {
                delta.zip_mut_with(&acts.pre[i], |d, &z| *d *= act.derivative(z));
            }
            let input = if i == 0 { &acts.input } else { &acts.post[i - 1] };
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let next = delta.dot(&layer.weights.t());
            grads.push((gw, gb));
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    pub fn to_document(&self) -> NetworkDoc {
        NetworkDoc {
            version: PARAMS_FORMAT_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDoc {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &NetworkDoc) -> Result<Self, NetError> {
        if doc.version != PARAMS_FORMAT_VERSION {
            return Err(NetError::Format(format!("unsupported version {}", doc.version)));
        }
        let layers = doc
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let weights = Array2::from_shape_vec((l.inputs, l.outputs), l.weights.clone())
                    .map_err(|_| NetError::Format(format!("layer {i}: weight count does not match {}x{}", l.inputs, l.outputs)))?;
                Ok(Dense {
                    weights,
                    bias: Array1::from(l.bias.clone()),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        Network::from_layers(layers)
    }
}

/// Versioned checkpoint document: layer specs plus flat parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDoc {
    pub version: u32,
    pub layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDoc {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_document().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = NetworkDoc::deserialize(deserializer)?;
        Network::from_document(&doc).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    /// `(1 - p_y^q) / q`, which emphasises samples the model is already confident on.
    GeneralizedCrossEntropy { q: f64 },
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::SoftmaxCrossEntropy => write!(f, "softmax_cross_entropy"),
            LossKind::GeneralizedCrossEntropy { q } => write!(f, "gce:{q}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "softmax_cross_entropy" || s == "ce" {
            return Ok(LossKind::SoftmaxCrossEntropy);
        }
        if let Some(q) = s.strip_prefix("gce:") {
            if let Ok(q) = q.parse::<f64>() {
                if q > 0.0 && q <= 1.0 {
                    return Ok(LossKind::GeneralizedCrossEntropy { q });
                }
            }
        }
        Err(NetError::UnknownLoss(s.to_string()))
    }
}

/// Row-wise softmax.
pub fn softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise `log softmax`.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Per-sample loss values for `kind`.
pub fn per_sample_loss(logits: ArrayView2<f64>, targets: &[usize], kind: LossKind) -> Result<Vec<f64>, NetError> {
    check_targets(logits, targets)?;
    let logp = log_softmax(logits);
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, &t)| match kind {
            LossKind::SoftmaxCrossEntropy => -logp[[i, t]],
            LossKind::GeneralizedCrossEntropy { q } => (1.0 - (q * logp[[i, t]]).exp()) / q,
        })
        .collect())
}

/// Weighted mean loss over the batch and its gradient with respect to the
/// logits. With `weights = None` every sample has weight 1; the mean always
/// divides by the batch size.
pub fn loss_and_logit_grad(
    logits: ArrayView2<f64>,
    targets: &[usize],
    weights: Option<&[f64]>,
    kind: LossKind,
) -> Result<(f64, Array2<f64>), NetError> {
    check_targets(logits, targets)?;
    if let Some(w) = weights {
        if w.len() != targets.len() {
            return Err(NetError::Shape(format!("{} weights for {} samples", w.len(), targets.len())));
        }
    }
    let n = targets.len() as f64;
    let probs = softmax(logits);
    let logp = log_softmax(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[i]);
        let mut row = grad.row_mut(i);
        match kind {
            LossKind::SoftmaxCrossEntropy => {
                loss += -w * logp[[i, t]];
                row[t] -= 1.0;
                row.mapv_inplace(|g| g * w / n);
            }
            LossKind::GeneralizedCrossEntropy { q } => {
                let pq = (q * logp[[i, t]]).exp();
                loss += w * (1.0 - pq) / q;
                // d/dlogit_k (1 - p_t^q)/q = p_t^q (p_k - 1[k = t])
                row[t] -= 1.0;
                row.mapv_inplace(|g| g * pq * w / n);
            }
        }
    }
    Ok((loss / n, grad))
}

fn check_targets(logits: ArrayView2<f64>, targets: &[usize]) -> Result<(), NetError> {
    if logits.nrows() != targets.len() {
        return Err(NetError::Shape(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    let classes = logits.ncols();
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(NetError::TargetOutOfRange { target: t, classes });
    }
    Ok(())
}

/// Full forward + backward pass of a classifier on a labelled batch.
pub fn backward(
    net: &Network,
    batch: ArrayView2<f64>,
    targets: &[usize],
    loss: LossKind,
) -> Result<(Gradients, f64), NetError> {
    let acts = net.forward(batch)?;
    let (value, grad) = loss_and_logit_grad(acts.output().view(), targets, None, loss)?;
    let (grads, _) = net.backward(&acts, grad.view())?;
    Ok((grads, value))
}

/// Backward rule of a gradient-reversal node: the forward pass is the
/// identity, the incoming gradient is scaled by `-lambda`.
pub fn gradient_reversal(upstream: ArrayView2<f64>, lambda: f64) -> Array2<f64> {
    upstream.mapv(|g| -lambda * g)
}

/// Optimiser and schedule settings shared by every training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(NetError::InvalidConfig(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(NetError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(NetError::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        AdamState {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Increments `state.t` before use, so the
/// first call runs step `t = 1`.
pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState, config: &TrainConfig) -> Result<(), NetError> {
    if grads.layers.len() != net.layers.len() || state.m.layers.len() != net.layers.len() {
        return Err(NetError::Shape("gradient blocks do not match network layers".into()));
    }
    for (i, ((layer, (gw, gb)), (mw, mb))) in net.layers.iter().zip(&grads.layers).zip(&state.m.layers).enumerate() {
        if gw.dim() != layer.weights.dim() || gb.len() != layer.bias.len() || mw.dim() != gw.dim() || mb.len() != gb.len() {
            return Err(NetError::Shape(format!("layer {i}: gradient shape mismatch")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.epsilon;
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[i];
        let (mw, mb) = &mut state.m.layers[i];
        let (vw, vb) = &mut state.v.layers[i];
        ndarray::Zip::from(&mut layer.weights)
            .and(gw)
            .and(mw)
            .and(vw)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut layer.bias)
            .and(gb)
            .and(mb)
            .and(vb)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}
