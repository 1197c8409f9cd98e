//! Datasets with a controllable attribute-bias strength `H(Y|A)`.

mod colorize;
mod idx;
mod io;

pub use colorize::{colorize, downsample, nearest_palette_index, ColorSplit, ColorizeConfig, PALETTE};
pub use idx::{parse_idx, IdxData, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use io::{decode_container, encode_container, read_container, read_csv, write_container, write_csv, CONTAINER_MAGIC};

use crate::exact_info::{self, binary_entropy, Axis, JointPmf};
use ndarray::{Array2, Axis as NdAxis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    InvalidParameter(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} outside alphabet of size {size} ({which})")]
    LabelOutOfRange { which: &'static str, label: usize, size: usize },
    #[error("non-finite feature at row {0}")]
    NonFinite(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("insufficient samples in {what}: need {needed}, have {available}")]
    Insufficient { what: String, needed: usize, available: usize },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Info(#[from] exact_info::InfoError),
}

/// Features `X`, target `Y` and protected attribute `A` for each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub targets: Vec<usize>,
    pub attributes: Vec<usize>,
    pub n_targets: usize,
    pub n_attributes: usize,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        targets: Vec<usize>,
        attributes: Vec<usize>,
        n_targets: usize,
        n_attributes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        let ds = LabeledDataset {
            features,
            targets,
            attributes,
            n_targets,
            n_attributes,
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.features.nrows();
        if self.targets.len() != n {
            return Err(DataError::LengthMismatch(n, self.targets.len()));
        }
        if self.attributes.len() != n {
            return Err(DataError::LengthMismatch(n, self.attributes.len()));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= self.n_targets) {
            return Err(DataError::LabelOutOfRange { which: "target", label: t, size: self.n_targets });
        }
        if let Some(&a) = self.attributes.iter().find(|&&a| a >= self.n_attributes) {
            return Err(DataError::LabelOutOfRange { which: "attribute", label: a, size: self.n_attributes });
        }
        if let Some(row) = self.features.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(DataError::NonFinite(row));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows in the given order.
    pub fn subset(&self, rows: &[usize], provenance: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select(NdAxis(0), rows),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            attributes: rows.iter().map(|&r| self.attributes[r]).collect(),
            n_targets: self.n_targets,
            n_attributes: self.n_attributes,
            provenance: provenance.into(),
        }
    }

    /// Sample indices grouped by `(y, a)` cell, in ascending cell order.
    pub fn cells(&self) -> BTreeMap<(usize, usize), Vec<usize>> {
        let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, (&y, &a)) in self.targets.iter().zip(&self.attributes).enumerate() {
            cells.entry((y, a)).or_default().push(i);
        }
        cells
    }

    pub fn hya(&self) -> f64 {
        empirical_hya(&self.targets, &self.attributes).expect("validated dataset")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    /// Per-channel variance of the training colour around each digit's mean.
    ColorVariance,
    /// Share of bias-conflicting samples in the training set.
    ConflictFraction,
    /// Probability that the attribute agrees with the binary target.
    AgreementProb,
}

impl BiasKind {
    pub fn range(self) -> (f64, f64) {
        match self {
            BiasKind::ColorVariance => (0.0, 0.05),
            BiasKind::ConflictFraction => (0.0, 0.5),
            BiasKind::AgreementProb => (0.5, 1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BiasKind::ColorVariance => "color_variance",
            BiasKind::ConflictFraction => "conflict_fraction",
            BiasKind::AgreementProb => "agreement_prob",
        }
    }
}

impl std::str::FromStr for BiasKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "color_variance" => Ok(BiasKind::ColorVariance),
            "conflict_fraction" => Ok(BiasKind::ConflictFraction),
            "agreement_prob" => Ok(BiasKind::AgreementProb),
            other => Err(DataError::InvalidParameter(format!(
                "unknown bias kind `{other}` (expected color_variance, conflict_fraction or agreement_prob)"
            ))),
        }
    }
}

/// One setting of the bias-strength knob.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub kind: BiasKind,
    pub value: f64,
}

impl BiasSpec {
    pub fn new(kind: BiasKind, value: f64) -> Result<Self, DataError> {
        let (lo, hi) = kind.range();
        if !(value >= lo && value <= hi) {
            return Err(DataError::InvalidParameter(format!(
                "{} must lie in [{lo}, {hi}], got {value}",
                kind.name()
            )));
        }
        Ok(BiasSpec { kind, value })
    }

    /// `H(Y|A)` implied by the knob for balanced binary tasks, when it has a
    /// closed form.
    pub fn nominal_hya(&self) -> Option<f64> {
        match self.kind {
            BiasKind::AgreementProb | BiasKind::ConflictFraction => Some(binary_entropy(self.value)),
            BiasKind::ColorVariance => None,
        }
    }

    /// Coordinate that increases with `H(Y|A)`: the nominal `H(Y|A)` where
    /// available, otherwise the colour variance itself.
    pub fn axis_value(&self) -> f64 {
        self.nominal_hya().unwrap_or(self.value)
    }
}

/// Shape of the synthetic Gaussian task: a target pattern on `signal_dims`
/// coordinates, an attribute pattern on `spurious_dims` coordinates, and
/// isotropic noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianTask {
    pub signal_dims: usize,
    pub spurious_dims: usize,
    pub noise_sigma: f64,
}

impl Default for GaussianTask {
    fn default() -> Self {
        GaussianTask {
            signal_dims: 2,
            spurious_dims: 4,
            noise_sigma: 1.0,
        }
    }
}

impl GaussianTask {
    pub fn dim(&self) -> usize {
        self.signal_dims + self.spurious_dims
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.dim() == 0 {
            return Err(DataError::InvalidParameter("task needs at least one feature dimension".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidParameter(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    fn sample_row<R: Rng>(&self, y: usize, a: usize, noise: &Normal<f64>, rng: &mut R, out: &mut [f64]) {
        let sy = if y == 1 { 1.0 } else { -1.0 };
        let sa = if a == 1 { 1.0 } else { -1.0 };
        for (j, v) in out.iter_mut().enumerate() {
            let mean = if j < self.signal_dims { sy } else { sa };
            *v = mean + noise.sample(rng);
        }
    }
}

/// Balanced binary `Y`, `A = Y` with probability `q`, features from
/// [`GaussianTask`].
pub fn gen_gaussian_biased(n: usize, q: f64, task: &GaussianTask, seed: u64) -> Result<LabeledDataset, DataError> {
    if n == 0 {
        return Err(DataError::InvalidParameter("n must be >= 1".into()));
    }
    BiasSpec::new(BiasKind::AgreementProb, q)?;
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, task.noise_sigma).expect("validated sigma");
    let d = task.dim();
    let mut features = Array2::zeros((n, d));
    let mut targets = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        let y = rng.random_range(0..2usize);
        let a = if rng.random::<f64>() < q { y } else { 1 - y };
        task.sample_row(y, a, &noise, &mut rng, &mut row);
        features.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        targets.push(y);
        attributes.push(a);
    }
    LabeledDataset::new(
        features,
        targets,
        attributes,
        2,
        2,
        format!("gaussian(q={q}, signal={}, spurious={}, sigma={}, seed={seed})", task.signal_dims, task.spurious_dims, task.noise_sigma),
    )
}

/// Gaussian-task samples with exact per-cell counts `((y, a), count)`.
pub fn gen_gaussian_cells(cells: &[((usize, usize), usize)], task: &GaussianTask, seed: u64) -> Result<LabeledDataset, DataError> {
    task.validate()?;
    if let Some(((y, a), _)) = cells.iter().find(|((y, a), _)| *y > 1 || *a > 1) {
        return Err(DataError::InvalidParameter(format!("cell ({y}, {a}) is not binary")));
    }
    let n: usize = cells.iter().map(|(_, c)| c).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, task.noise_sigma).expect("validated sigma");
    let d = task.dim();
    let mut features = Array2::zeros((n, d));
    let mut targets = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    let mut row = vec![0.0; d];
    let mut i = 0;
    for &((y, a), count) in cells {
        for _ in 0..count {
            task.sample_row(y, a, &noise, &mut rng, &mut row);
            features.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
            targets.push(y);
            attributes.push(a);
            i += 1;
        }
    }
    LabeledDataset::new(features, targets, attributes, 2, 2, format!("gaussian-cells(seed={seed})"))
}

/// How [`mix_bias`] holds the training-set size fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// The output has exactly this many samples.
    ConstantTotal(usize),
    /// The output keeps this many biased samples and adds conflicting ones.
    ConstantBiased(usize),
}

fn take_stratified(
    pool: &LabeledDataset,
    count: usize,
    pool_name: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, DataError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if count > pool.len() {
        return Err(DataError::Insufficient {
            what: format!("{pool_name} pool"),
            needed: count,
            available: pool.len(),
        });
    }
    let cells = pool.cells();
    let k = cells.len();
    let mut out = Vec::with_capacity(count);
    for (i, ((y, a), rows)) in cells.into_iter().enumerate() {
        let want = count / k + usize::from(i < count % k);
        if want > rows.len() {
            return Err(DataError::Insufficient {
                what: format!("{pool_name} pool cell (y={y}, a={a})"),
                needed: want,
                available: rows.len(),
            });
        }
        let mut rows = rows;
        rows.shuffle(rng);
        out.extend_from_slice(&rows[..want]);
    }
    Ok(out)
}

/// Mixes biased (`y = a`) and bias-conflicting (`y != a`) samples so that a
/// `conflict_fraction` share of the output is bias-conflicting. Each pool is
/// drawn evenly across its `(y, a)` cells.
pub fn mix_bias(
    biased_pool: &LabeledDataset,
    conflicting_pool: &LabeledDataset,
    conflict_fraction: f64,
    mode: MixMode,
    seed: u64,
) -> Result<LabeledDataset, DataError> {
    BiasSpec::new(BiasKind::ConflictFraction, conflict_fraction)?;
    if biased_pool.dim() != conflicting_pool.dim() {
        return Err(DataError::LengthMismatch(biased_pool.dim(), conflicting_pool.dim()));
    }
    if biased_pool.targets.iter().zip(&biased_pool.attributes).any(|(y, a)| y != a) {
        return Err(DataError::InvalidParameter("biased pool contains samples with y != a".into()));
    }
    if conflicting_pool.targets.iter().zip(&conflicting_pool.attributes).any(|(y, a)| y == a) {
        return Err(DataError::InvalidParameter("conflicting pool contains samples with y = a".into()));
    }
    let (n_biased, n_conflicting) = match mode {
        MixMode::ConstantTotal(total) => {
            let c = (conflict_fraction * total as f64).round() as usize;
            (total - c, c)
        }
        MixMode::ConstantBiased(biased) => {
            let c = (conflict_fraction / (1.0 - conflict_fraction) * biased as f64).round() as usize;
            (biased, c)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b_rows = take_stratified(biased_pool, n_biased, "biased", &mut rng)?;
    let c_rows = take_stratified(conflicting_pool, n_conflicting, "conflicting", &mut rng)?;
    let d = biased_pool.dim();
    let n = b_rows.len() + c_rows.len();
    let mut features = Array2::zeros((n, d));
    let mut targets = Vec::with_capacity(n);
    let mut attributes = Vec::with_capacity(n);
    for (i, (pool, r)) in b_rows
        .iter()
        .map(|&r| (biased_pool, r))
        .chain(c_rows.iter().map(|&r| (conflicting_pool, r)))
        .enumerate()
    {
        features.row_mut(i).assign(&pool.features.row(r));
        targets.push(pool.targets[r]);
        attributes.push(pool.attributes[r]);
    }
    let mode_name = match mode {
        MixMode::ConstantTotal(t) => format!("constant_total={t}"),
        MixMode::ConstantBiased(b) => format!("constant_biased={b}"),
    };
    LabeledDataset::new(
        features,
        targets,
        attributes,
        biased_pool.n_targets.max(conflicting_pool.n_targets),
        biased_pool.n_attributes.max(conflicting_pool.n_attributes),
        format!("mix({mode_name}, conflict_fraction={conflict_fraction}, seed={seed})"),
    )
}

/// `H(Y|A)` of the empirical joint of the two label vectors, in nats.
pub fn empirical_hya(targets: &[usize], attributes: &[usize]) -> Result<f64, DataError> {
    if targets.len() != attributes.len() {
        return Err(DataError::LengthMismatch(targets.len(), attributes.len()));
    }
    if targets.is_empty() {
        return Err(DataError::InvalidParameter("need at least one sample".into()));
    }
    let ny = targets.iter().max().map_or(1, |m| m + 1);
    let na = attributes.iter().max().map_or(1, |m| m + 1);
    let mut counts = vec![0u64; ny * na];
    for (&y, &a) in targets.iter().zip(attributes) {
        counts[y * na + a] += 1;
    }
    let joint = JointPmf::from_counts([1, ny, na], &counts)?;
    Ok(exact_info::conditional_entropy(&joint, Axis::Y, Axis::A)?)
}

/// Balanced evaluation splits: `unbiased` has exactly `per_cell` samples in
/// every `(y, a)` cell, `bias_conflicting` keeps only the cells with `y != a`.
pub fn split_eval(source: &LabeledDataset, per_cell: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if per_cell == 0 {
        return Err(DataError::InvalidParameter("per_cell must be >= 1".into()));
    }
    let mut cells = source.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unbiased = Vec::new();
    let mut conflicting = Vec::new();
    for y in 0..source.n_targets {
        for a in 0..source.n_attributes {
            let rows = cells.remove(&(y, a)).unwrap_or_default();
            if rows.len() < per_cell {
                return Err(DataError::Insufficient {
                    what: format!("cell (y={y}, a={a})"),
                    needed: per_cell,
                    available: rows.len(),
                });
            }
            let mut rows = rows;
            rows.shuffle(&mut rng);
            rows.truncate(per_cell);
            rows.sort_unstable();
            if y != a {
                conflicting.extend_from_slice(&rows);
            }
            unbiased.extend(rows);
        }
    }
    Ok((
        source.subset(&unbiased, format!("unbiased({}, per_cell={per_cell})", source.provenance)),
        source.subset(&conflicting, format!("bias_conflicting({}, per_cell={per_cell})", source.provenance)),
    ))
}
