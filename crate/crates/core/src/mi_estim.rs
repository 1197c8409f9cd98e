//! Sample-based mutual-information estimators.
//!
//! * [`plugin_mi`]: discrete × discrete, exact MI of the empirical joint.
//! * [`binned_mi`]: equal-width binning of a low-dimensional continuous column.
//! * [`knn_mi`]: `H(Z) - Σ_a p(a) H(Z | A = a)` with Kozachenko–Leonenko entropies.
//! * [`neural_dv_mi`] / [`neural_dv_mi_continuous`]: a statistics network
//!   trained on the Donsker–Varadhan lower bound.
//!
//! Reported values are clamped at zero; the raw value is kept in the
//! diagnostics whenever the clamp fires.

use crate::exact_info::{self, Axis, JointPmf};
use crate::tinynet::{self, Activation, AdamState, Network, TrainConfig};
use ndarray::{s, Array1, Array2, ArrayView2, Axis as NdAxis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use statrs::function::gamma::{digamma, ln_gamma};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Largest continuous dimension accepted by [`binned_mi`].
pub const MAX_BINNED_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum EstimError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("binned estimator supports at most {MAX_BINNED_DIM} dimensions, got {0}")]
    UnsupportedDimension(usize),
    #[error("bins_per_dim must be >= 2, got {0}")]
    InvalidBins(usize),
    #[error("k must be >= 1")]
    InvalidK,
    #[error("label class {class} has {count} samples, needs more than k = {k}")]
    SparseClass { class: usize, count: usize, k: usize },
    #[error("non-finite feature value at row {0}")]
    NonFinite(usize),
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Info(#[from] exact_info::InfoError),
    #[error(transparent)]
    Net(#[from] tinynet::NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plugin,
    Binned,
    Knn,
    NeuralDv,
}

/// A point estimate in nats together with estimator-specific diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub estimator: EstimatorKind,
    pub value_nats: f64,
    pub n: usize,
    pub diagnostics: BTreeMap<String, Value>,
}

impl MiEstimate {
    fn new(estimator: EstimatorKind, raw: f64, n: usize, mut diagnostics: BTreeMap<String, Value>) -> Self {
        let value_nats = if raw.is_finite() && raw >= 0.0 {
            raw
        } else {
            diagnostics.insert("clamped".into(), Value::Bool(true));
            diagnostics.insert(
                "raw_value".into(),
                if raw.is_finite() { Value::from(raw) } else { Value::from(raw.to_string()) },
            );
            0.0
        };
        MiEstimate {
            estimator,
            value_nats,
            n,
            diagnostics,
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        self.diagnostics.get(key).and_then(Value::as_bool).unwrap_or(false)
    }
}

/// Continuous feature rows paired with a discrete label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePairs {
    pub continuous: Array2<f64>,
    pub discrete: Vec<usize>,
}

impl SamplePairs {
    pub fn new(continuous: Array2<f64>, discrete: Vec<usize>) -> Result<Self, EstimError> {
        if continuous.nrows() != discrete.len() {
            return Err(EstimError::LengthMismatch(continuous.nrows(), discrete.len()));
        }
        if let Some(row) = continuous
            .rows()
            .into_iter()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(EstimError::NonFinite(row));
        }
        Ok(SamplePairs { continuous, discrete })
    }

    pub fn len(&self) -> usize {
        self.discrete.len()
    }

    pub fn is_empty(&self) -> bool {
        self.discrete.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.continuous.ncols()
    }

    fn alphabet(&self) -> usize {
        self.discrete.iter().max().map_or(0, |m| m + 1)
    }
}

fn alphabet(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Mutual information of the empirical joint of two label vectors.
pub fn plugin_mi(x: &[usize], y: &[usize]) -> Result<MiEstimate, EstimError> {
    if x.len() != y.len() {
        return Err(EstimError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EstimError::TooFewSamples { needed: 2, got: x.len() });
    }
    let (nx, ny) = (alphabet(x), alphabet(y));
    let mut counts = vec![0u64; nx * ny];
    for (&a, &b) in x.iter().zip(y) {
        counts[a * ny + b] += 1;
    }
    let joint = JointPmf::from_counts([nx, ny, 1], &counts)?;
    let mi = exact_info::mutual_information(&joint, Axis::Z, Axis::Y)?;
    let mut diag = BTreeMap::new();
    diag.insert("x_alphabet".into(), Value::from(nx));
    diag.insert("y_alphabet".into(), Value::from(ny));
    // Entropy differences can land a hair below zero on independent data.
    let raw = if mi < 0.0 && mi > -1e-12 { 0.0 } else { mi };
    Ok(MiEstimate::new(EstimatorKind::Plugin, raw, x.len(), diag))
}

/// Equal-width bins over each continuous column's observed range, then the
/// plug-in estimate on `(bin id, label)`.
pub fn binned_mi(pairs: &SamplePairs, bins_per_dim: usize) -> Result<MiEstimate, EstimError> {
    let d = pairs.dim();
    if d > MAX_BINNED_DIM {
        return Err(EstimError::UnsupportedDimension(d));
    }
    if bins_per_dim < 2 {
        return Err(EstimError::InvalidBins(bins_per_dim));
    }
    let n = pairs.len();
    if n < 2 {
        return Err(EstimError::TooFewSamples { needed: 2, got: n });
    }
    let mut bin_ids = vec![0usize; n];
    for col in 0..d {
        let column = pairs.continuous.column(col);
        let lo = column.fold(f64::INFINITY, |m, &v| m.min(v));
        let hi = column.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let width = hi - lo;
        for (id, &v) in bin_ids.iter_mut().zip(column.iter()) {
            // A constant column collapses into a single bin.
            let b = if width > 0.0 {
                (((v - lo) / width) * bins_per_dim as f64).floor().min((bins_per_dim - 1) as f64) as usize
            } else {
                0
            };
            *id = *id * bins_per_dim + b;
        }
    }
    // Compact the occupied bins so the count table stays small.
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    for &id in &bin_ids {
        let next = remap.len();
        remap.entry(id).or_insert(next);
    }
    let compact: Vec<usize> = bin_ids.iter().map(|id| remap[id]).collect();
    let mut est = plugin_mi(&compact, &pairs.discrete)?;
    est.estimator = EstimatorKind::Binned;
    let cells = bins_per_dim.pow(d as u32) * pairs.alphabet().max(1);
    est.diagnostics.insert("bins_per_dim".into(), Value::from(bins_per_dim));
    est.diagnostics.insert("occupied_bins".into(), Value::from(remap.len()));
    if n < 5 * cells {
        est.diagnostics.insert("low_sample".into(), Value::Bool(true));
    }
    Ok(est)
}

/// Deterministic tie-breaking offset in `[-1e-10, 1e-10]` derived from the
/// point itself and how many identical points preceded it.
fn jitter(bits: &[u64], label: usize, occurrence: usize, dim: usize) -> f64 {
    let mut h = Sha256::new();
    for b in bits {
        h.update(b.to_le_bytes());
    }
    h.update((label as u64).to_le_bytes());
    h.update((occurrence as u64).to_le_bytes());
    h.update((dim as u64).to_le_bytes());
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    let unit = (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * unit - 1.0) * 1e-10
}

/// Kozachenko–Leonenko differential entropy (nats) of the rows of `points`.
fn kl_entropy(points: &Array2<f64>, k: usize) -> f64 {
    let n = points.nrows();
    let d = points.ncols();
    let log_radii: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = points.row(i);
            let mut nearest = vec![f64::INFINITY; k];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let xj = points.row(j);
                let dist2: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 < nearest[k - 1] {
                    let mut pos = k - 1;
                    while pos > 0 && nearest[pos - 1] > dist2 {
                        nearest[pos] = nearest[pos - 1];
                        pos -= 1;
                    }
                    nearest[pos] = dist2;
                }
            }
            0.5 * nearest[k - 1].ln()
        })
        .collect();
    let log_unit_ball = (d as f64 / 2.0) * std::f64::consts::PI.ln() - ln_gamma(d as f64 / 2.0 + 1.0);
    let mean_log_r = log_radii.iter().sum::<f64>() / n as f64;
    digamma(n as f64) - digamma(k as f64) + log_unit_ball + d as f64 * mean_log_r
}

/// k-nearest-neighbour estimate of `I(Z; label)` for continuous `Z`.
pub fn knn_mi(pairs: &SamplePairs, k: usize) -> Result<MiEstimate, EstimError> {
    if k == 0 {
        return Err(EstimError::InvalidK);
    }
    let n = pairs.len();
    if n < 2 {
        return Err(EstimError::TooFewSamples { needed: 2, got: n });
    }
    let classes = pairs.alphabet();
    let mut counts = vec![0usize; classes];
    for &l in &pairs.discrete {
        counts[l] += 1;
    }
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c > 0 && c <= k) {
        return Err(EstimError::SparseClass { class, count, k });
    }
    let mut diag = BTreeMap::new();
    diag.insert("k".into(), Value::from(k));
    if counts.iter().filter(|&&c| c > 0).count() == 1 {
        diag.insert("single_class".into(), Value::Bool(true));
        return Ok(MiEstimate::new(EstimatorKind::Knn, 0.0, n, diag));
    }

    // Canonical order (label, then coordinates) makes the result independent
    // of the input row order.
    let d = pairs.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pairs.discrete[a].cmp(&pairs.discrete[b]).then_with(|| {
            let ra = pairs.continuous.row(a);
            let rb = pairs.continuous.row(b);
            ra.iter()
                .zip(rb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    let mut seen: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
    let mut points = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut jittered = 0usize;
    for (dst, &src) in order.iter().enumerate() {
        let row = pairs.continuous.row(src);
        let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let label = pairs.discrete[src];
        let occurrence = seen.entry((bits.clone(), label)).or_insert(0);
        for c in 0..d {
            let shift = if *occurrence > 0 { jitter(&bits, label, *occurrence, c) } else { 0.0 };
            points[[dst, c]] = row[c] + shift * row[c].abs().max(1.0);
        }
        if *occurrence > 0 {
            jittered += 1;
        }
        *occurrence += 1;
        labels.push(label);
    }
    // Cross-class duplicates are also ties for H(Z); break them the same way.
    let mut global: HashMap<Vec<u64>, usize> = HashMap::new();
    for i in 0..n {
        let bits: Vec<u64> = points.row(i).iter().map(|v| v.to_bits()).collect();
        let occurrence = global.entry(bits.clone()).or_insert(0);
        if *occurrence > 0 {
            for c in 0..d {
                let v = points[[i, c]];
                points[[i, c]] = v + jitter(&bits, usize::MAX, *occurrence, c) * v.abs().max(1.0);
            }
            jittered += 1;
        }
        *occurrence += 1;
    }

    let h_total = kl_entropy(&points, k);
    let mut h_cond = 0.0;
    let mut start = 0;
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        debug_assert!(labels[start..start + count].iter().all(|&l| l == class));
        let block = points.slice(s![start..start + count, ..]).to_owned();
        h_cond += count as f64 / n as f64 * kl_entropy(&block, k);
        start += count;
    }
    diag.insert("h_marginal".into(), Value::from(h_total));
    diag.insert("h_conditional".into(), Value::from(h_cond));
    if jittered > 0 {
        diag.insert("jittered_points".into(), Value::from(jittered));
    }
    Ok(MiEstimate::new(EstimatorKind::Knn, h_total - h_cond, n, diag))
}

/// Settings for the Donsker–Varadhan estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Smoothing rate of the running partition-function estimate.
    pub ema_rate: f64,
    pub holdout_fraction: f64,
    /// Shuffled copies of the held-out labels used for the marginal term
    /// (continuous pairs only).
    pub eval_permutations: usize,
    /// Held-out evaluations spread over training; the best one is reported.
    /// Guards against the statistics network overfitting when the label is
    /// nearly determined by the features.
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for DvConfig {
    fn default() -> Self {
        DvConfig {
            hidden_width: 64,
            hidden_layers: 2,
            learning_rate: 1e-3,
            batch_size: 256,
            iterations: 2000,
            ema_rate: 0.99,
            holdout_fraction: 0.2,
            eval_permutations: 8,
            checkpoints: 20,
            seed: 0,
        }
    }
}

impl DvConfig {
    pub fn validate(&self) -> Result<(), EstimError> {
        let bad = |m: &str| Err(EstimError::InvalidConfig(m.to_string()));
        if self.hidden_width == 0 || self.hidden_layers == 0 {
            return bad("statistics network needs at least one hidden layer of positive width");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad("ema_rate must lie in [0, 1)");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)");
        }
        if self.eval_permutations == 0 {
            return bad("eval_permutations must be >= 1");
        }
        if self.checkpoints == 0 {
            return bad("checkpoints must be >= 1");
        }
        Ok(())
    }

    /// Whether the held-out bound is evaluated after iteration `it`.
    fn is_checkpoint(&self, it: usize) -> bool {
        let stride = self.iterations.div_ceil(self.checkpoints);
        (it + 1) % stride == 0 || it + 1 == self.iterations
    }

    fn adam(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            ..TrainConfig::default()
        }
    }

    fn network<R: Rng>(&self, inputs: usize, outputs: usize, rng: &mut R) -> Network {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        widths.push(outputs);
        Network::new(&widths, Activation::Elu, Activation::Identity, rng)
    }
}

/// Minimum sample count accepted by the neural estimators.
pub const DV_MIN_SAMPLES: usize = 64;

/// Value and output-gradient of the Donsker–Varadhan objective
/// `mean(T_joint) - ln mean(exp T_marginal)` on one batch.
///
/// `partition` replaces the batch mean of `exp T_marginal` in the gradient
/// denominator (moving-average correction); pass `None` for the plain batch
/// gradient. Gradients are for *ascent*.
pub(crate) fn dv_batch(t_joint: &[f64], t_marginal: &[f64], partition: Option<f64>) -> (f64, Vec<f64>, Vec<f64>, f64) {
    let nj = t_joint.len() as f64;
    let nm = t_marginal.len() as f64;
    let max = t_marginal.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp: Vec<f64> = t_marginal.iter().map(|&v| (v - max).exp()).collect();
    let sum_exp: f64 = exp.iter().sum();
    let log_mean_exp = max + (sum_exp / nm).ln();
    let value = t_joint.iter().sum::<f64>() / nj - log_mean_exp;
    let g_joint = vec![1.0 / nj; t_joint.len()];
    let batch_mean_exp = (log_mean_exp).exp();
    let denom = partition.unwrap_or(batch_mean_exp);
    let g_marg = t_marginal
        .iter()
        .map(|&v| -((v - max).exp() * max.exp()) / (nm * denom))
        .collect();
    (value, g_joint, g_marg, batch_mean_exp)
}

struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(NdAxis(0)).expect("nonempty");
        let scale = x.std_axis(NdAxis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Standardizer { mean, scale }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }
}

fn split_indices(n: usize, holdout: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_eval = ((n as f64 * holdout).round() as usize).clamp(1, n - 1);
    let eval = idx[..n_eval].to_vec();
    let train = idx[n_eval..].to_vec();
    (train, eval)
}

fn select_rows(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(NdAxis(0), rows)
}

/// Donsker–Varadhan estimate of `I(Z; label)` with a statistics network
/// `T(z)[label]` that has one output per label value.
///
/// Marginal pairs during training come from shuffling labels inside each
/// batch. On the held-out split the marginal term is evaluated exactly over
/// the empirical label marginal; the best of `config.checkpoints` held-out
/// evaluations is reported.
pub fn neural_dv_mi(pairs: &SamplePairs, config: &DvConfig) -> Result<MiEstimate, EstimError> {
    config.validate()?;
    let n = pairs.len();
    if n < DV_MIN_SAMPLES {
        return Err(EstimError::TooFewSamples { needed: DV_MIN_SAMPLES, got: n });
    }
    let classes = pairs.alphabet();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, eval_idx) = split_indices(n, config.holdout_fraction, &mut rng);
    let scaler = Standardizer::fit(select_rows(&pairs.continuous, &train_idx).view());
    let x = scaler.apply(pairs.continuous.view());
    let labels = &pairs.discrete;

    let xe = select_rows(&x, &eval_idx);
    let mut label_freq = vec![0.0; classes];
    for &r in &eval_idx {
        label_freq[labels[r]] += 1.0 / eval_idx.len() as f64;
    }
    // Held-out bound with the marginal term taken exactly over the label
    // marginal: ln( mean_i sum_y p(y) exp T(z_i)[y] ).
    let heldout = |net: &Network| -> Result<f64, EstimError> {
        let out = net.predict(xe.view())?;
        let joint = eval_idx.iter().enumerate().map(|(i, &r)| out[[i, labels[r]]]).sum::<f64>() / eval_idx.len() as f64;
        let terms: Vec<f64> = (0..eval_idx.len())
            .flat_map(|i| {
                let row = out.row(i);
                label_freq
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(y, &p)| row[y] + p.ln())
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(joint - (log_sum_exp(&terms) - (eval_idx.len() as f64).ln()))
    };

    let mut net = config.network(pairs.dim(), classes, &mut rng);
    let mut adam = AdamState::new(&net);
    let adam_cfg = config.adam();
    let batch = config.batch_size.min(train_idx.len());
    let mut partition: Option<f64> = None;
    let mut last_train = 0.0;
    let mut best = Checkpoint::default();
    for it in 0..config.iterations {
        let rows: Vec<usize> = (0..batch).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect();
        let mut shuffled: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        shuffled.shuffle(&mut rng);
        let xb = select_rows(&x, &rows);
        let acts = net.forward(xb.view())?;
        let out = acts.output();
        let t_joint: Vec<f64> = rows.iter().enumerate().map(|(i, &r)| out[[i, labels[r]]]).collect();
        let t_marg: Vec<f64> = shuffled.iter().enumerate().map(|(i, &l)| out[[i, l]]).collect();
        let (value, gj, _, batch_exp) = dv_batch(&t_joint, &t_marg, None);
        let ma = match partition {
            None => batch_exp,
            Some(p) => config.ema_rate * p + (1.0 - config.ema_rate) * batch_exp,
        };
        partition = Some(ma);
        let (_, _, gm, _) = dv_batch(&t_joint, &t_marg, Some(ma));
        if !value.is_finite() || !ma.is_finite() {
            return Err(EstimError::Diverged { iteration: it });
        }
        last_train = value;
        // Minimise the negative bound.
        let mut grad_out = Array2::zeros(out.raw_dim());
        for (i, &r) in rows.iter().enumerate() {
            grad_out[[i, labels[r]]] -= gj[i];
            grad_out[[i, shuffled[i]]] -= gm[i];
        }
        let (grads, _) = net.backward(&acts, grad_out.view())?;
        if !grads.is_finite() {
            return Err(EstimError::Diverged { iteration: it });
        }
        tinynet::adam_step(&mut net, &grads, &mut adam, &adam_cfg)?;
        if config.is_checkpoint(it) {
            best.offer(heldout(&net)?, it);
        }
    }

    let raw = best.value;
    if !raw.is_finite() {
        return Err(EstimError::Diverged { iteration: config.iterations });
    }
    let mut diag = dv_diagnostics(config, last_train, eval_idx.len(), &best);
    diag.insert("labels".into(), Value::from(classes));
    Ok(MiEstimate::new(EstimatorKind::NeuralDv, raw, n, diag))
}

/// Donsker–Varadhan estimate of `I(X; Y)` for two continuous blocks with a
/// scalar statistics network on `(x, y)`.
pub fn neural_dv_mi_continuous(x: &Array2<f64>, y: &Array2<f64>, config: &DvConfig) -> Result<MiEstimate, EstimError> {
    config.validate()?;
    if x.nrows() != y.nrows() {
        return Err(EstimError::LengthMismatch(x.nrows(), y.nrows()));
    }
    let n = x.nrows();
    if n < DV_MIN_SAMPLES {
        return Err(EstimError::TooFewSamples { needed: DV_MIN_SAMPLES, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_idx, eval_idx) = split_indices(n, config.holdout_fraction, &mut rng);
    let sx = Standardizer::fit(select_rows(x, &train_idx).view());
    let sy = Standardizer::fit(select_rows(y, &train_idx).view());
    let xs = sx.apply(x.view());
    let ys = sy.apply(y.view());
    let (dx, dy) = (x.ncols(), y.ncols());

    let ne = eval_idx.len();
    let mut joint_in = Array2::zeros((ne, dx + dy));
    for (i, &r) in eval_idx.iter().enumerate() {
        joint_in.slice_mut(s![i, ..dx]).assign(&xs.row(r));
        joint_in.slice_mut(s![i, dx..]).assign(&ys.row(r));
    }
    let mut marg_in = Array2::zeros((ne * config.eval_permutations, dx + dy));
    for p in 0..config.eval_permutations {
        let mut partner = eval_idx.clone();
        partner.shuffle(&mut rng);
        for (i, (&r, &q)) in eval_idx.iter().zip(&partner).enumerate() {
            let row = p * ne + i;
            marg_in.slice_mut(s![row, ..dx]).assign(&xs.row(r));
            marg_in.slice_mut(s![row, dx..]).assign(&ys.row(q));
        }
    }
    let heldout = |net: &Network| -> Result<f64, EstimError> {
        let joint = net.predict(joint_in.view())?.sum() / ne as f64;
        let t_marg = net.predict(marg_in.view())?.column(0).to_vec();
        Ok(joint - (log_sum_exp(&t_marg) - (t_marg.len() as f64).ln()))
    };

    let mut net = config.network(dx + dy, 1, &mut rng);
    let mut adam = AdamState::new(&net);
    let adam_cfg = config.adam();
    let batch = config.batch_size.min(train_idx.len());
    let mut partition: Option<f64> = None;
    let mut last_train = 0.0;
    let mut best = Checkpoint::default();
    let mut input = Array2::zeros((2 * batch, dx + dy));
    for it in 0..config.iterations {
        let rows: Vec<usize> = (0..batch).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect();
        let mut partner = rows.clone();
        partner.shuffle(&mut rng);
        for (i, (&r, &p)) in rows.iter().zip(&partner).enumerate() {
            input.slice_mut(s![i, ..dx]).assign(&xs.row(r));
            input.slice_mut(s![i, dx..]).assign(&ys.row(r));
            input.slice_mut(s![batch + i, ..dx]).assign(&xs.row(r));
            input.slice_mut(s![batch + i, dx..]).assign(&ys.row(p));
        }
        let acts = net.forward(input.view())?;
        let out = acts.output().column(0).to_vec();
        let (t_joint, t_marg) = out.split_at(batch);
        let (value, gj, _, batch_exp) = dv_batch(t_joint, t_marg, None);
        let ma = match partition {
            None => batch_exp,
            Some(p) => config.ema_rate * p + (1.0 - config.ema_rate) * batch_exp,
        };
        partition = Some(ma);
        let (_, _, gm, _) = dv_batch(t_joint, t_marg, Some(ma));
        if !value.is_finite() || !ma.is_finite() {
            return Err(EstimError::Diverged { iteration: it });
        }
        last_train = value;
        let grad_out = Array2::from_shape_fn((2 * batch, 1), |(i, _)| if i < batch { -gj[i] } else { -gm[i - batch] });
        let (grads, _) = net.backward(&acts, grad_out.view())?;
        if !grads.is_finite() {
            return Err(EstimError::Diverged { iteration: it });
        }
        tinynet::adam_step(&mut net, &grads, &mut adam, &adam_cfg)?;
        if config.is_checkpoint(it) {
            best.offer(heldout(&net)?, it);
        }
    }

    let raw = best.value;
    if !raw.is_finite() {
        return Err(EstimError::Diverged { iteration: config.iterations });
    }
    let diag = dv_diagnostics(config, last_train, ne, &best);
    Ok(MiEstimate::new(EstimatorKind::NeuralDv, raw, n, diag))
}

/// Best held-out bound seen so far.
struct Checkpoint {
    value: f64,
    iteration: usize,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Checkpoint { value: f64::NEG_INFINITY, iteration: 0 }
    }
}

impl Checkpoint {
    fn offer(&mut self, value: f64, iteration: usize) {
        if value > self.value {
            *self = Checkpoint { value, iteration };
        }
    }
}

fn dv_diagnostics(config: &DvConfig, last_train: f64, n_eval: usize, best: &Checkpoint) -> BTreeMap<String, Value> {
    let mut diag = BTreeMap::new();
    diag.insert("best_iteration".into(), Value::from(best.iteration + 1));
    diag.insert("checkpoints".into(), Value::from(config.checkpoints));
    diag.insert("final_train_bound".into(), Value::from(last_train));
    diag.insert("iterations".into(), Value::from(config.iterations));
    diag.insert("batch_size".into(), Value::from(config.batch_size));
    diag.insert("heldout".into(), Value::from(n_eval));
    diag
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn plugin_identical_labels() {
        let x: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let est = plugin_mi(&x, &x).unwrap();
        assert!((est.value_nats - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(est.n, 100);
    }

    #[test]
    fn plugin_constant_target_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<usize> = (0..500).map(|_| rng.random_range(0..3)).collect();
        let y = vec![0usize; 500];
        assert_eq!(plugin_mi(&x, &y).unwrap().value_nats, 0.0);
    }

    #[test]
    fn plugin_length_mismatch() {
        assert!(matches!(plugin_mi(&[0, 1], &[0]), Err(EstimError::LengthMismatch(2, 1))));
        assert!(matches!(plugin_mi(&[0], &[0]), Err(EstimError::TooFewSamples { .. })));
    }

    fn gaussian_column(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn binned_independent_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = gaussian_column(10_000, &mut rng);
        let a: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let est = binned_mi(&SamplePairs::new(z, a).unwrap(), 8).unwrap();
        assert!(est.value_nats <= 0.05, "{}", est.value_nats);
    }

    #[test]
    fn binned_near_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let z = Array2::from_shape_fn((10_000, 1), |(i, _)| a[i] as f64 + 1e-3 * rng.random::<f64>());
        let est = binned_mi(&SamplePairs::new(z, a).unwrap(), 8).unwrap();
        assert!((est.value_nats - std::f64::consts::LN_2).abs() < 0.05);
    }

    #[test]
    fn binned_degenerate_inputs() {
        let z = ndarray::array![[0.0], [1.0]];
        let est = binned_mi(&SamplePairs::new(z, vec![0, 1]).unwrap(), 4).unwrap();
        assert!(est.value_nats.is_finite());
        assert!(est.flag("low_sample"));
        let constant = Array2::from_elem((50, 2), 3.0);
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let est = binned_mi(&SamplePairs::new(constant, labels.clone()).unwrap(), 4).unwrap();
        assert_eq!(est.value_nats, 0.0);
        let wide = Array2::zeros((50, 5));
        assert!(matches!(
            binned_mi(&SamplePairs::new(wide, labels).unwrap(), 4),
            Err(EstimError::UnsupportedDimension(5))
        ));
    }

    #[test]
    fn knn_single_class_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = gaussian_column(200, &mut rng);
        let est = knn_mi(&SamplePairs::new(z, vec![1; 200]).unwrap(), 5).unwrap();
        assert_eq!(est.value_nats, 0.0);
    }

    #[test]
    fn knn_sparse_class_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = gaussian_column(30, &mut rng);
        let mut labels = vec![0usize; 30];
        labels[3] = 2;
        labels[7] = 2;
        match knn_mi(&SamplePairs::new(z, labels).unwrap(), 5) {
            Err(EstimError::SparseClass { class: 2, count: 2, k: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn knn_handles_duplicates() {
        let z = Array2::from_shape_fn((200, 1), |(i, _)| (i % 10) as f64);
        let labels: Vec<usize> = (0..200).map(|i| (i / 10) % 2).collect();
        let est = knn_mi(&SamplePairs::new(z, labels).unwrap(), 3).unwrap();
        assert!(est.value_nats.is_finite());
        assert!(est.diagnostics.contains_key("jittered_points"));
    }

    #[test]
    fn dv_batch_value_matches_definition() {
        let tj = [1.0, 2.0];
        let tm = [0.0, (3.0f64).ln()];
        let (v, gj, gm, mean_exp) = dv_batch(&tj, &tm, None);
        assert!((v - (1.5 - (2.0f64).ln())).abs() < 1e-12);
        assert!((mean_exp - 2.0).abs() < 1e-12);
        assert_eq!(gj, vec![0.5, 0.5]);
        // -exp(t_i) / (n * mean_exp)
        assert!((gm[0] + 0.25).abs() < 1e-12 && (gm[1] + 0.75).abs() < 1e-12);
    }

    #[test]
    fn dv_rejects_small_samples_and_bad_config() {
        let z = Array2::zeros((10, 1));
        let pairs = SamplePairs::new(z, vec![0; 10]).unwrap();
        assert!(matches!(neural_dv_mi(&pairs, &DvConfig::default()), Err(EstimError::TooFewSamples { .. })));
        let cfg = DvConfig { ema_rate: 1.0, ..DvConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn clamp_records_raw_value() {
        let est = MiEstimate::new(EstimatorKind::Knn, -0.01, 10, BTreeMap::new());
        assert_eq!(est.value_nats, 0.0);
        assert!(est.flag("clamped"));
        assert_eq!(est.diagnostics["raw_value"], Value::from(-0.01));
    }

    #[test]
    fn estimate_json_shape() {
        let est = plugin_mi(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap();
        let json = serde_json::to_value(&est).unwrap();
        assert_eq!(json["estimator"], "plugin");
        assert_eq!(json["n"], 4);
        assert!(json["value_nats"].is_f64());
        assert!(json["diagnostics"].is_object());
    }
}
