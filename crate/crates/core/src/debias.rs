//! The baseline classifier and six attribute-bias-removal training methods.
//!
//! Every model is an MLP feature extractor `f: X -> Z` followed by a linear
//! head `g: Z -> Y`. The methods differ only in what else touches `Z` during
//! training:
//!
//! | method     | extra signal on `Z`                                         |
//! |------------|-------------------------------------------------------------|
//! | `baseline` | none                                                        |
//! | `lnl_adv`  | attribute adversary through gradient reversal               |
//! | `mine_adv` | Donsker–Varadhan estimate of `I(Z;A)`, minimised            |
//! | `end`      | squared cosine between same-attribute features, minimised   |
//! | `lff`      | none; samples re-weighted by a GCE-trained biased twin      |
//! | `di`       | none; one head per attribute value, logits summed at test   |
//! | `blindeye` | confusion of an attribute classifier towards uniform        |
//!
//! Random streams for initialisation, batching and auxiliary networks are
//! kept apart, so with `lambda = 0` the regularised methods follow the
//! baseline's parameter trajectory bit for bit.

use crate::datagen::LabeledDataset;
use crate::mi_estim::dv_batch;
use crate::tinynet::{
    self, adam_step, loss_and_logit_grad, per_sample_loss, softmax, Activation, AdamState, Gradients, LossKind,
    NetError, Network, TrainConfig,
};
use ndarray::{Array2, ArrayView2, Axis as NdAxis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown method `{0}` (expected one of baseline, lnl_adv, mine_adv, end, lff, di, blindeye)")]
    UnknownMethod(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("data has {got} feature columns, model expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    LnlAdv,
    MineAdv,
    End,
    Lff,
    Di,
    Blindeye,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::LnlAdv,
        Method::MineAdv,
        Method::End,
        Method::Lff,
        Method::Di,
        Method::Blindeye,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::LnlAdv => "lnl_adv",
            Method::MineAdv => "mine_adv",
            Method::End => "end",
            Method::Lff => "lff",
            Method::Di => "di",
            Method::Blindeye => "blindeye",
        }
    }

    /// Regulariser weight picked from {0.1, 0.5, 1, 5} on the Gaussian task at
    /// agreement 0.9. Methods without a weighted term return 0.
    pub fn default_lambda(self) -> f64 {
        match self {
            Method::Baseline | Method::Lff | Method::Di => 0.0,
            Method::LnlAdv => 1.0,
            Method::MineAdv => 1.0,
            Method::End => 0.1,
            Method::Blindeye => 0.1,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = DebiasError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DebiasError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub base: TrainConfig,
    /// Weight of the method's regulariser or adversary.
    pub lambda: f64,
    /// Hidden widths of the extractor; the last one is the feature width.
    pub extractor_widths: Vec<usize>,
    /// Hidden width of adversaries, statistics networks and attribute
    /// classifiers.
    pub aux_width: usize,
    /// Exponent of the generalized cross-entropy for the LfF biased twin.
    pub gce_q: f64,
    /// Weight of EnD's optional entangling term (same target, different
    /// attribute pulled together). 0 disables it.
    pub end_entangle: f64,
    /// Moving-average rate of the partition estimate in `mine_adv`.
    pub dv_ema_rate: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            base: TrainConfig::default(),
            lambda: 0.0,
            extractor_widths: vec![32, 16],
            aux_width: 16,
            gce_q: 0.7,
            end_entangle: 0.0,
            dv_ema_rate: 0.99,
        }
    }
}

impl DebiasConfig {
    pub fn for_method(method: Method) -> Self {
        DebiasConfig { lambda: method.default_lambda(), ..DebiasConfig::default() }
    }

    pub fn feature_dim(&self) -> usize {
        *self.extractor_widths.last().expect("validated widths")
    }

    pub fn validate(&self) -> Result<(), DebiasError> {
        self.base.validate()?;
        if self.base.epochs == 0 {
            return Err(DebiasError::InvalidConfig("epochs must be >= 1 (the training log would be empty)".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DebiasError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.extractor_widths.is_empty() || self.extractor_widths.contains(&0) || self.aux_width == 0 {
            return Err(DebiasError::InvalidConfig("layer widths must be >= 1".into()));
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(DebiasError::InvalidConfig(format!("gce_q must lie in (0, 1], got {}", self.gce_q)));
        }
        if !(self.end_entangle >= 0.0 && self.end_entangle.is_finite()) {
            return Err(DebiasError::InvalidConfig("end_entangle must be >= 0".into()));
        }
        if !(self.dv_ema_rate >= 0.0 && self.dv_ema_rate < 1.0) {
            return Err(DebiasError::InvalidConfig("dv_ema_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Method-specific means over the epoch (regulariser value, mean LfF
    /// weight, adversary loss, ...).
    pub diagnostics: BTreeMap<String, f64>,
}

/// Extractor, head(s) and training record. `di` carries one head per
/// attribute value; every other method has exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub method: Method,
    pub lambda: f64,
    pub seed: u64,
    pub provenance: String,
    pub feature_dim: usize,
    pub extractor: Network,
    pub heads: Vec<Network>,
    pub log: Vec<EpochLog>,
}

const CHECKPOINT_VERSION: u32 = 1;

impl TrainedModel {
    pub fn validate(&self) -> Result<(), DebiasError> {
        let bad = |m: &str| Err(DebiasError::Checkpoint(m.to_string()));
        if self.version != CHECKPOINT_VERSION {
            return bad(&format!("unsupported checkpoint version {}", self.version));
        }
        if self.extractor.output_width() != self.feature_dim {
            return bad("extractor output width differs from feature_dim");
        }
        if self.heads.is_empty() {
            return bad("model has no head");
        }
        let classes = self.heads[0].output_width();
        if self.heads.iter().any(|h| h.input_width() != self.feature_dim || h.output_width() != classes) {
            return bad("head widths are inconsistent");
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.extractor.input_width()
    }

    pub fn classes(&self) -> usize {
        self.heads[0].output_width()
    }

    /// Sum of the heads' logits.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, DebiasError> {
        let z = extract_features(self, x)?;
        let mut out = self.heads[0].predict(z.view())?;
        for h in &self.heads[1..] {
            out += &h.predict(z.view())?;
        }
        Ok(out)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>, DebiasError> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64, DebiasError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(data.features.view())?;
        let hits = pred.iter().zip(&data.targets).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DebiasError> {
        let m: TrainedModel = serde_json::from_str(text).map_err(|e| DebiasError::Checkpoint(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DebiasError> {
        std::fs::write(path, self.to_json()).map_err(|source| DebiasError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DebiasError> {
        let text = std::fs::read_to_string(path).map_err(|source| DebiasError::Io { path: path.display().to_string(), source })?;
        TrainedModel::from_json(&text)
    }
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Extractor output `Z` for every row of `x`.
pub fn extract_features(model: &TrainedModel, x: ArrayView2<f64>) -> Result<Array2<f64>, DebiasError> {
    if x.ncols() != model.input_width() {
        return Err(DebiasError::Shape { expected: model.input_width(), got: x.ncols() });
    }
    Ok(model.extractor.predict(x)?)
}

/// Value of the EnD disentangling term with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTerm {
    pub value: f64,
    pub pairs: usize,
    /// A zero-norm feature vector was seen; its similarities count as 0.
    pub zero_norm: bool,
}

fn unit_rows(z: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut u = z.to_owned();
    for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (u, norms)
}

/// Mean over pairs selected by `pick(i, j)` of `f(cos_ij)`, with the gradient
/// with respect to `z` given `df = f'(cos)`.
fn pair_cosine_term(
    z: ArrayView2<f64>,
    pick: impl Fn(usize, usize) -> bool,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64) -> f64,
) -> (PairTerm, Array2<f64>) {
    let (u, norms) = unit_rows(z);
    let n = z.nrows();
    let mut grad = Array2::zeros(z.raw_dim());
    let (mut total, mut pairs, mut zero_norm) = (0.0, 0usize, false);
    for i in 0..n {
        for j in (i + 1)..n {
            if !pick(i, j) {
                continue;
            }
            pairs += 1;
            if norms[i] == 0.0 || norms[j] == 0.0 {
                zero_norm = true;
                total += f(0.0);
                continue;
            }
            let c = u.row(i).dot(&u.row(j));
            total += f(c);
            let g = df(c);
            // d cos / d z_i = (u_j - cos u_i) / |z_i|
            let gi = (&u.row(j) - &(&u.row(i) * c)) * (g / norms[i]);
            let gj = (&u.row(i) - &(&u.row(j) * c)) * (g / norms[j]);
            let mut r = grad.row_mut(i);
            r += &gi;
            let mut r = grad.row_mut(j);
            r += &gj;
        }
    }
    if pairs > 0 {
        grad /= pairs as f64;
        total /= pairs as f64;
    }
    (PairTerm { value: total, pairs, zero_norm }, grad)
}

fn end_term(z: ArrayView2<f64>, attributes: &[usize]) -> (PairTerm, Array2<f64>) {
    pair_cosine_term(z, |i, j| attributes[i] == attributes[j], |c| c * c, |c| 2.0 * c)
}

fn end_entangle_term(z: ArrayView2<f64>, targets: &[usize], attributes: &[usize]) -> (PairTerm, Array2<f64>) {
    pair_cosine_term(
        z,
        |i, j| targets[i] == targets[j] && attributes[i] != attributes[j],
        |c| 1.0 - c,
        |_| -1.0,
    )
}

/// Mean squared cosine similarity over all same-attribute pairs in the batch.
/// Zero-norm vectors count as orthogonal and set [`PairTerm::zero_norm`].
pub fn end_regularizer(features: ArrayView2<f64>, attributes: &[usize]) -> Result<PairTerm, DebiasError> {
    if features.nrows() < 2 {
        return Err(DebiasError::InvalidConfig("the EnD term needs a batch of at least 2".into()));
    }
    if features.nrows() != attributes.len() {
        return Err(DebiasError::Shape { expected: features.nrows(), got: attributes.len() });
    }
    Ok(end_term(features, attributes).0)
}

/// Per-sample loss smoothing for LfF. Weights come from these averages,
/// each normalised by its class maximum, not from the noisy batch losses.
const LFF_LOSS_EMA: f64 = 0.7;

/// LfF relative-difficulty weight `ce_biased / (ce_biased + ce_debiased)`,
/// 0.5 when both losses are 0.
pub fn lff_weight(ce_biased: f64, ce_debiased: f64) -> Result<f64, DebiasError> {
    if !(ce_biased >= 0.0) || !(ce_debiased >= 0.0) {
        return Err(DebiasError::InvalidConfig(format!("losses must be >= 0, got ({ce_biased}, {ce_debiased})")));
    }
    let total = ce_biased + ce_debiased;
    Ok(if total == 0.0 { 0.5 } else { ce_biased / total })
}

/// Mean cross-entropy between the uniform distribution and
/// `softmax(attribute_logits)`; equals `ln |A|` exactly at uniform outputs.
pub fn blindeye_regularizer(attribute_logits: ArrayView2<f64>) -> Result<f64, DebiasError> {
    if attribute_logits.ncols() < 2 {
        return Err(DebiasError::InvalidConfig("need at least 2 attribute values".into()));
    }
    Ok(blindeye_term(attribute_logits).0)
}

/// Value and logit gradient (`(p - 1/K) / n`) of the uniform cross-entropy.
fn blindeye_term(logits: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (n, k) = logits.dim();
    let logp = tinynet::log_softmax(logits);
    let value = -logp.sum() / (n * k) as f64;
    let grad = softmax(logits).mapv(|p| (p - 1.0 / k as f64) / n as f64);
    (value, grad)
}

/// Per-method state that lives next to the classifier during training.
enum Aux {
    None,
    Adversary { net: Network, adam: AdamState },
    Stats { net: Network, adam: AdamState, partition: Option<f64> },
    Biased { net: Network, adam: AdamState },
    AttrClassifier { net: Network, adam: AdamState },
}

const BATCH_STREAM: u64 = 0x6261_7463_6865_7321;
const AUX_STREAM: u64 = 0x6175_7869_6c69_6172;

fn aux_net(inputs: usize, width: usize, outputs: usize, hidden: Activation, rng: &mut ChaCha8Rng) -> Network {
    Network::new(&[inputs, width, outputs], hidden, Activation::Identity, rng)
}

fn classifier_widths(input: usize, config: &DebiasConfig) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(&config.extractor_widths);
    w
}

fn accumulate(diag: &mut BTreeMap<String, f64>, key: &str, v: f64) {
    *diag.entry(key.to_string()).or_insert(0.0) += v;
}

/// Trains `method` on `data`. Deterministic for a fixed `config.base.seed`.
pub fn train(method: Method, data: &LabeledDataset, config: &DebiasConfig) -> Result<TrainedModel, DebiasError> {
    config.validate()?;
    if data.is_empty() {
        return Err(DebiasError::InvalidConfig("training data is empty".into()));
    }
    let n_attr = data.n_attributes;
    if matches!(method, Method::LnlAdv | Method::MineAdv | Method::Blindeye) && n_attr < 2 {
        return Err(DebiasError::InvalidConfig(format!("{method} needs at least 2 attribute values")));
    }
    let classes = data.n_targets.max(2);
    let d = data.dim();
    let seed = config.base.seed;
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ BATCH_STREAM);
    let mut aux_rng = ChaCha8Rng::seed_from_u64(seed ^ AUX_STREAM);

    let widths = classifier_widths(d, config);
    let feat = config.feature_dim();
    let mut extractor = Network::new(&widths, Activation::Relu, Activation::Relu, &mut init_rng);
    let n_heads = if method == Method::Di { n_attr.max(1) } else { 1 };
    let mut heads: Vec<Network> = (0..n_heads)
        .map(|_| Network::new(&[feat, classes], Activation::Identity, Activation::Identity, &mut init_rng))
        .collect();
    let mut adam_e = AdamState::new(&extractor);
    let mut adam_h: Vec<AdamState> = heads.iter().map(AdamState::new).collect();

    let mut aux = match method {
        Method::LnlAdv => {
            let net = aux_net(feat, config.aux_width, n_attr, Activation::Relu, &mut aux_rng);
            Aux::Adversary { adam: AdamState::new(&net), net }
        }
        Method::MineAdv => {
            let net = aux_net(feat, config.aux_width, n_attr, Activation::Elu, &mut aux_rng);
            Aux::Stats { adam: AdamState::new(&net), net, partition: None }
        }
        Method::Lff => {
            let mut w = widths.clone();
            w.push(classes);
            let net = Network::new(&w, Activation::Relu, Activation::Identity, &mut aux_rng);
            Aux::Biased { adam: AdamState::new(&net), net }
        }
        Method::Blindeye => {
            let net = aux_net(feat, config.aux_width, n_attr, Activation::Relu, &mut aux_rng);
            Aux::AttrClassifier { adam: AdamState::new(&net), net }
        }
        Method::Baseline | Method::End | Method::Di => Aux::None,
    };

    let lambda = config.lambda;
    let active = lambda > 0.0;
    let n = data.len();
    let bs = config.base.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.base.epochs);
    let (mut ema_b, mut ema_d) = (vec![0.0; n], vec![0.0; n]);

    for epoch in 0..config.base.epochs {
        order.shuffle(&mut batch_rng);
        let (mut loss_sum, mut hits, mut steps) = (0.0, 0usize, 0usize);
        let mut diag = BTreeMap::new();
        for (step, rows) in order.chunks(bs).enumerate() {
            let diverged = || DebiasError::Diverged { epoch, step };
            let xb = data.features.select(NdAxis(0), rows);
            let yb: Vec<usize> = rows.iter().map(|&r| data.targets[r]).collect();
            let ab: Vec<usize> = rows.iter().map(|&r| data.attributes[r]).collect();
            let m = rows.len();

            let acts_e = extractor.forward(xb.view())?;
            let z = acts_e.output().clone();

            // LfF: weights from the smoothed losses of both models; the biased
            // twin then takes its own GCE step.
            let weights = if let Aux::Biased { net, adam } = &mut aux {
                let acts_b = net.forward(xb.view())?;
                let ce_b = per_sample_loss(acts_b.output().view(), &yb, LossKind::SoftmaxCrossEntropy)?;
                let logits_d = heads[0].predict(z.view())?;
                let ce_d = per_sample_loss(logits_d.view(), &yb, LossKind::SoftmaxCrossEntropy)?;
                for (i, &r) in rows.iter().enumerate() {
                    ema_b[r] = LFF_LOSS_EMA * ema_b[r] + (1.0 - LFF_LOSS_EMA) * ce_b[i];
                    ema_d[r] = LFF_LOSS_EMA * ema_d[r] + (1.0 - LFF_LOSS_EMA) * ce_d[i];
                }
                let class_max = |ema: &[f64], y: usize| {
                    data.targets.iter().zip(ema).filter(|(&t, _)| t == y).fold(0.0f64, |m, (_, &v)| m.max(v))
                };
                let (mb, md): (Vec<f64>, Vec<f64>) = (0..classes).map(|y| (class_max(&ema_b, y), class_max(&ema_d, y))).unzip();
                let norm = |v: f64, m: f64| if m > 0.0 { v / m } else { 0.0 };
                let w = rows
                    .iter()
                    .map(|&r| {
                        let y = data.targets[r];
                        lff_weight(norm(ema_b[r], mb[y]), norm(ema_d[r], md[y]))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let (gce, g) = loss_and_logit_grad(acts_b.output().view(), &yb, None, LossKind::GeneralizedCrossEntropy { q: config.gce_q })?;
                let (grads, _) = net.backward(&acts_b, g.view())?;
                if !gce.is_finite() || !grads.is_finite() {
                    return Err(diverged());
                }
                adam_step(net, &grads, adam, &config.base)?;
                accumulate(&mut diag, "biased_gce", gce);
                accumulate(&mut diag, "mean_weight", w.iter().sum::<f64>() / m as f64);
                Some(w)
            } else {
                None
            };

            // Classification through the head(s).
            let mut grad_z = Array2::zeros(z.raw_dim());
            let mut head_grads = Vec::with_capacity(heads.len());
            let mut batch_loss = 0.0;
            let mut summed_logits = Array2::zeros((m, classes));
            if method == Method::Di {
                for (dom, head) in heads.iter().enumerate() {
                    let idx: Vec<usize> = (0..m).filter(|&i| ab[i] == dom).collect();
                    let acts_h = head.forward(z.view())?;
                    summed_logits += acts_h.output();
                    if idx.is_empty() {
                        head_grads.push(Gradients::zeros_like(head));
                        continue;
                    }
                    // Only this domain's rows contribute; the mean stays over the batch.
                    let mut w = vec![0.0; m];
                    for &i in &idx {
                        w[i] = 1.0;
                    }
                    let (l, g) = loss_and_logit_grad(acts_h.output().view(), &yb, Some(&w), LossKind::SoftmaxCrossEntropy)?;
                    batch_loss += l;
                    let (hg, gz) = head.backward(&acts_h, g.view())?;
                    grad_z += &gz;
                    head_grads.push(hg);
                }
            } else {
                let acts_h = heads[0].forward(z.view())?;
                summed_logits.assign(acts_h.output());
                let (l, g) = loss_and_logit_grad(acts_h.output().view(), &yb, weights.as_deref(), LossKind::SoftmaxCrossEntropy)?;
                batch_loss = l;
                let (hg, gz) = heads[0].backward(&acts_h, g.view())?;
                grad_z += &gz;
                head_grads.push(hg);
            }
            if !batch_loss.is_finite() {
                return Err(diverged());
            }
            hits += argmax_rows(&summed_logits).iter().zip(&yb).filter(|(p, t)| p == t).count();

            // Method-specific signal on Z and auxiliary updates.
            match (&mut aux, method) {
                (Aux::Adversary { net, adam }, _) => {
                    if active {
                        let acts_a = net.forward(z.view())?;
                        let (l, g) = loss_and_logit_grad(acts_a.output().view(), &ab, None, LossKind::SoftmaxCrossEntropy)?;
                        let (grads, gz) = net.backward(&acts_a, g.view())?;
                        if !l.is_finite() || !grads.is_finite() {
                            return Err(diverged());
                        }
                        adam_step(net, &grads, adam, &config.base)?;
                        grad_z += &tinynet::gradient_reversal(gz.view(), lambda);
                        accumulate(&mut diag, "adversary_loss", l);
                    }
                }
                (Aux::Stats { net, adam, partition }, _) => {
                    if active {
                        let mut shuffled = ab.clone();
                        shuffled.shuffle(&mut aux_rng);
                        let acts_t = net.forward(z.view())?;
                        let out = acts_t.output();
                        let tj: Vec<f64> = (0..m).map(|i| out[[i, ab[i]]]).collect();
                        let tm: Vec<f64> = (0..m).map(|i| out[[i, shuffled[i]]]).collect();
                        let (value, _, _, batch_exp) = dv_batch(&tj, &tm, None);
                        let ma = match *partition {
                            None => batch_exp,
                            Some(p) => config.dv_ema_rate * p + (1.0 - config.dv_ema_rate) * batch_exp,
                        };
                        *partition = Some(ma);
                        let (_, gj, gm, _) = dv_batch(&tj, &tm, Some(ma));
                        if !value.is_finite() || !ma.is_finite() {
                            return Err(diverged());
                        }
                        // Descent direction for the statistics network (ascent on DV).
                        let mut g = Array2::zeros(out.raw_dim());
                        for i in 0..m {
                            g[[i, ab[i]]] -= gj[i];
                            g[[i, shuffled[i]]] -= gm[i];
                        }
                        let (grads, gz) = net.backward(&acts_t, g.view())?;
                        if !grads.is_finite() {
                            return Err(diverged());
                        }
                        adam_step(net, &grads, adam, &config.base)?;
                        // The extractor descends lambda * DV, i.e. the reverse
                        // of the statistics network's input gradient.
                        grad_z += &tinynet::gradient_reversal(gz.view(), lambda);
                        accumulate(&mut diag, "dv_bound", value);
                    }
                }
                (Aux::AttrClassifier { net, adam }, _) => {
                    if active {
                        let acts_a = net.forward(z.view())?;
                        let (l, g) = loss_and_logit_grad(acts_a.output().view(), &ab, None, LossKind::SoftmaxCrossEntropy)?;
                        let (grads, _) = net.backward(&acts_a, g.view())?;
                        let (conf, gconf) = blindeye_term(acts_a.output().view());
                        let (_, gz) = net.backward(&acts_a, gconf.view())?;
                        if !l.is_finite() || !conf.is_finite() || !grads.is_finite() {
                            return Err(diverged());
                        }
                        adam_step(net, &grads, adam, &config.base)?;
                        grad_z.scaled_add(lambda, &gz);
                        accumulate(&mut diag, "attribute_loss", l);
                        accumulate(&mut diag, "confusion", conf);
                    }
                }
                (Aux::None, Method::End) => {
                    if active && m >= 2 {
                        let (term, g) = end_term(z.view(), &ab);
                        grad_z.scaled_add(lambda, &g);
                        accumulate(&mut diag, "disentangle", term.value);
                        if term.zero_norm {
                            accumulate(&mut diag, "zero_norm_batches", 1.0);
                        }
                        if config.end_entangle > 0.0 {
                            let (ent, g) = end_entangle_term(z.view(), &yb, &ab);
                            grad_z.scaled_add(lambda * config.end_entangle, &g);
                            accumulate(&mut diag, "entangle", ent.value);
                        }
                    }
                }
                _ => {}
            }

            let (grads_e, _) = extractor.backward(&acts_e, grad_z.view())?;
            if !grads_e.is_finite() || head_grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged());
            }
            adam_step(&mut extractor, &grads_e, &mut adam_e, &config.base)?;
            for ((head, g), st) in heads.iter_mut().zip(&head_grads).zip(adam_h.iter_mut()) {
                adam_step(head, g, st, &config.base)?;
            }
            loss_sum += batch_loss;
            steps += 1;
        }
        for v in diag.values_mut() {
            *v /= steps as f64;
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / steps as f64,
            accuracy: hits as f64 / n as f64,
            diagnostics: diag,
        });
    }

    Ok(TrainedModel {
        version: CHECKPOINT_VERSION,
        method,
        lambda,
        seed,
        provenance: data.provenance.clone(),
        feature_dim: feat,
        extractor,
        heads,
        log,
    })
}

/// An untrained model with the architecture `train` would build, for
/// low-information reference audits.
pub fn untrained(input_width: usize, classes: usize, config: &DebiasConfig) -> Result<TrainedModel, DebiasError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.base.seed);
    let extractor = Network::new(&classifier_widths(input_width, config), Activation::Relu, Activation::Relu, &mut rng);
    let head = Network::new(&[config.feature_dim(), classes], Activation::Identity, Activation::Identity, &mut rng);
    Ok(TrainedModel {
        version: CHECKPOINT_VERSION,
        method: Method::Baseline,
        lambda: 0.0,
        seed: config.base.seed,
        provenance: "untrained".into(),
        feature_dim: config.feature_dim(),
        extractor,
        heads: vec![head],
        log: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_gaussian_biased, split_eval, GaussianTask};
    use crate::tinynet::Dense;
    use ndarray::{array, Array1};
    use rand::Rng;

    fn quick(lambda: f64, epochs: usize) -> DebiasConfig {
        DebiasConfig {
            base: TrainConfig { epochs, seed: 11, ..TrainConfig::default() },
            lambda,
            ..DebiasConfig::default()
        }
    }

    fn data(q: f64, n: usize, seed: u64) -> LabeledDataset {
        gen_gaussian_biased(n, q, &GaussianTask::default(), seed).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("csad".parse::<Method>().is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let ds = data(0.5, 100, 1);
        for m in Method::ALL {
            assert!(matches!(train(m, &ds, &quick(1.0, 0)), Err(DebiasError::InvalidConfig(_))));
        }
    }

    #[test]
    fn lambda_zero_matches_baseline() {
        let ds = data(0.8, 300, 2);
        let base = train(Method::Baseline, &ds, &quick(0.0, 2)).unwrap();
        for m in [Method::LnlAdv, Method::MineAdv, Method::End, Method::Blindeye] {
            let other = train(m, &ds, &quick(0.0, 2)).unwrap();
            assert_eq!(other.extractor, base.extractor, "{m}");
            assert_eq!(other.heads, base.heads, "{m}");
        }
    }

    #[test]
    fn every_method_trains() {
        let ds = data(0.8, 400, 3);
        for m in Method::ALL {
            let model = train(m, &ds, &quick(0.5, 2)).unwrap();
            assert_eq!(model.log.len(), 2);
            assert_eq!(model.heads.len(), if m == Method::Di { 2 } else { 1 });
            assert!(model.log.iter().all(|e| e.loss.is_finite()));
            let again = train(m, &ds, &quick(0.5, 2)).unwrap();
            assert_eq!(model, again, "{m} not deterministic");
        }
    }

    #[test]
    fn baseline_learns_unbiased_task() {
        let task = GaussianTask { noise_sigma: 0.5, ..GaussianTask::default() };
        let train_set = gen_gaussian_biased(2000, 0.5, &task, 4).unwrap();
        let model = train(Method::Baseline, &train_set, &quick(0.0, 10)).unwrap();
        let (unbiased, _) = split_eval(&gen_gaussian_biased(4000, 0.5, &task, 5).unwrap(), 500, 0).unwrap();
        assert!(model.accuracy(&unbiased).unwrap() >= 0.95);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = data(0.7, 200, 6);
        let model = train(Method::Di, &ds, &quick(0.0, 1)).unwrap();
        let back = TrainedModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);
        assert!(TrainedModel::from_json("{\"version\": 1}").is_err());
        let mut broken = model.clone();
        broken.feature_dim = 3;
        assert!(TrainedModel::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn identity_extractor_passes_inputs() {
        let ident = Dense { weights: Array2::eye(3), bias: Array1::zeros(3), activation: Activation::Identity };
        let head = Dense { weights: Array2::zeros((3, 2)), bias: Array1::zeros(2), activation: Activation::Identity };
        let model = TrainedModel {
            version: 1,
            method: Method::Baseline,
            lambda: 0.0,
            seed: 0,
            provenance: String::new(),
            feature_dim: 3,
            extractor: Network::from_layers(vec![ident]).unwrap(),
            heads: vec![Network::from_layers(vec![head]).unwrap()],
            log: vec![],
        };
        let x = array![[1.0, -2.0, 0.5], [0.0, 3.0, -1.0]];
        assert_eq!(extract_features(&model, x.view()).unwrap(), x);
        assert!(extract_features(&model, array![[1.0]].view()).is_err());
    }

    #[test]
    fn di_single_domain_is_plain_classifier() {
        let mut ds = data(0.7, 200, 7);
        ds.attributes.fill(0);
        ds.n_attributes = 1;
        let di = train(Method::Di, &ds, &quick(0.0, 2)).unwrap();
        let base = train(Method::Baseline, &ds, &quick(0.0, 2)).unwrap();
        assert_eq!(di.extractor, base.extractor);
        assert_eq!(di.heads, base.heads);
    }

    #[test]
    fn end_regularizer_examples() {
        let same = [0, 0];
        assert!((end_regularizer(array![[1.0, 2.0], [1.0, 2.0]].view(), &same).unwrap().value - 1.0).abs() < 1e-12);
        assert_eq!(end_regularizer(array![[1.0, 0.0], [0.0, 3.0]].view(), &same).unwrap().value, 0.0);
        let three = array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        assert!((end_regularizer(three.view(), &[0, 0, 0]).unwrap().value - 1.0 / 3.0).abs() < 1e-12);
        let zero = end_regularizer(array![[0.0, 0.0], [1.0, 0.0]].view(), &same).unwrap();
        assert!(zero.zero_norm && zero.value == 0.0);
        assert!(end_regularizer(array![[1.0, 0.0]].view(), &[0]).is_err());
        // Positive rescaling of rows changes nothing.
        let scaled = array![[3.0, 0.0], [0.5, 0.0], [0.0, 7.0]];
        assert_eq!(
            end_regularizer(three.view(), &[0, 0, 0]).unwrap().value,
            end_regularizer(scaled.view(), &[0, 0, 0]).unwrap().value
        );
    }

    #[test]
    fn end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Array2::from_shape_fn((5, 4), |_| rng.random_range(0.1..1.0));
        let attrs = [0, 1, 0, 0, 1];
        let (_, g) = end_term(z.view(), &attrs);
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..4 {
                let (mut p, mut mz) = (z.clone(), z.clone());
                p[[i, j]] += h;
                mz[[i, j]] -= h;
                let fd = (end_term(p.view(), &attrs).0.value - end_term(mz.view(), &attrs).0.value) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "({i},{j}): {fd} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn lff_weight_examples() {
        assert_eq!(lff_weight(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(lff_weight(0.0, 2.0).unwrap(), 0.0);
        assert_eq!(lff_weight(3.0, 1.0).unwrap(), 0.75);
        assert_eq!(lff_weight(0.0, 0.0).unwrap(), 0.5);
        assert!(lff_weight(-1.0, 1.0).is_err());
    }

    #[test]
    fn blindeye_examples() {
        let ln2 = std::f64::consts::LN_2;
        assert!((blindeye_regularizer(Array2::zeros((3, 2)).view()).unwrap() - ln2).abs() < 1e-12);
        let v = blindeye_regularizer(array![[3.0f64.ln(), 0.0], [3.0f64.ln(), 0.0]].view()).unwrap();
        assert!((v - 0.8370).abs() < 1e-4, "{v}");
        let sharp = blindeye_regularizer(array![[8.0, 0.0]].view()).unwrap();
        assert!(sharp > v);
        assert!(blindeye_regularizer(array![[1.0]].view()).is_err());
    }

    #[test]
    fn blindeye_gradient_matches_finite_differences() {
        let l = array![[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]];
        let (_, g) = blindeye_term(l.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let (mut p, mut m) = (l.clone(), l.clone());
                p[[i, j]] += h;
                m[[i, j]] -= h;
                let fd = (blindeye_term(p.view()).0 - blindeye_term(m.view()).0) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
    }
}
