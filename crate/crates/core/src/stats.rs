//! One-sided two-sample Kolmogorov–Smirnov test and breaking-point detection.
//!
//! The null hypothesis is "the method performs better than the baseline".
//! `D = sup_x [F_method(x) - F_baseline(x)]` is large when the method's
//! accuracies sit below the baseline's, so a small p-value means the method is
//! *not* better.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Significance level for rejecting "method is better than baseline".
pub const ALPHA: f64 = 0.05;

/// Default Monte-Carlo resample count for [`ks_permutation_p`].
pub const DEFAULT_RESAMPLES: usize = 100_000;

const SHARD: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sample needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("value {0} is not a finite number in [0, 1]")]
    OutOfRange(f64),
    #[error("grid has {grid} levels but {p_values} p-values")]
    LengthMismatch { grid: usize, p_values: usize },
    #[error("grid must be strictly ascending (level {index} = {value})")]
    NotAscending { index: usize, value: f64 },
    #[error("p-value {0} outside [0, 1]")]
    InvalidPValue(f64),
    #[error("need at least 1000 resamples, got {0}")]
    TooFewResamples(usize),
}

/// Accuracies from repeated randomized training runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TrialSamples {
    values: Vec<f64>,
}

impl TrialSamples {
    pub fn new(values: Vec<f64>) -> Result<Self, StatsError> {
        if values.len() < 2 {
            return Err(StatsError::TooFewValues(values.len()));
        }
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(StatsError::OutOfRange(v));
        }
        Ok(TrialSamples { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation (n - 1 denominator).
    pub fn std(&self) -> f64 {
        let m = self.mean();
        let ss: f64 = self.values.iter().map(|v| (v - m).powi(2)).sum();
        (ss / (self.values.len() - 1) as f64).sqrt()
    }
}

impl TryFrom<Vec<f64>> for TrialSamples {
    type Error = StatsError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        TrialSamples::new(values)
    }
}

impl From<TrialSamples> for Vec<f64> {
    fn from(s: TrialSamples) -> Self {
        s.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// `sup_x [F_a(x) - F_b(x)]` over the merged support, clamped at 0. Both ECDFs
/// are right-continuous and evaluated after every tied value has been counted.
fn one_sided_d(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max(i as f64 / n - j as f64 / m);
    }
    best
}

/// Asymptotic p-value `exp(-2 D^2 nm / (n + m))`.
pub fn ks_asymptotic_p(d: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (-2.0 * d * d * n * m / (n + m)).exp().clamp(0.0, 1.0)
}

pub fn ks_one_sided(method: &TrialSamples, baseline: &TrialSamples) -> KsResult {
    let d = one_sided_d(&sorted(&method.values), &sorted(&baseline.values));
    KsResult { d, p: ks_asymptotic_p(d, method.len(), baseline.len()) }
}

/// Pooled values sorted once, with the end index of each run of ties, so a
/// relabelling can be scored in a single pass.
struct Pooled {
    tie_ends: Vec<usize>,
    n: usize,
    m: usize,
}

impl Pooled {
    fn new(a: &[f64], b: &[f64]) -> Self {
        let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
        all.sort_by(f64::total_cmp);
        let mut tie_ends = Vec::new();
        for k in 1..=all.len() {
            if k == all.len() || all[k] != all[k - 1] {
                tie_ends.push(k);
            }
        }
        Pooled { tie_ends, n: a.len(), m: b.len() }
    }

    /// D for a labelling where `is_method[k]` marks sorted position `k`.
    fn d(&self, is_method: &[bool]) -> f64 {
        let (n, m) = (self.n as f64, self.m as f64);
        let (mut ca, mut cb, mut start) = (0usize, 0usize, 0usize);
        let mut best: f64 = 0.0;
        for &end in &self.tie_ends {
            for &lab in &is_method[start..end] {
                if lab {
                    ca += 1;
                } else {
                    cb += 1;
                }
            }
            start = end;
            best = best.max(ca as f64 / n - cb as f64 / m);
        }
        best
    }
}

/// Monte-Carlo permutation p-value for the one-sided statistic: the share of
/// random relabellings of the pooled sample whose `D` reaches the observed
/// one. Resamples are split into fixed shards, each with its own seeded stream,
/// so the result does not depend on the thread count.
pub fn ks_permutation_p(method: &TrialSamples, baseline: &TrialSamples, resamples: usize, seed: u64) -> Result<f64, StatsError> {
    if resamples < 1000 {
        return Err(StatsError::TooFewResamples(resamples));
    }
    let observed = ks_one_sided(method, baseline).d;
    let pooled = Pooled::new(&method.values, &baseline.values);
    let shards = resamples.div_ceil(SHARD);
    let hits: usize = (0..shards)
        .into_par_iter()
        .map(|s| {
            let count = SHARD.min(resamples - s * SHARD);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let mut labels: Vec<bool> = (0..pooled.n + pooled.m).map(|k| k < pooled.n).collect();
            let mut hits = 0;
            for _ in 0..count {
                labels.shuffle(&mut rng);
                if pooled.d(&labels) >= observed - 1e-12 {
                    hits += 1;
                }
            }
            hits
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    Ok(hits as f64 / resamples as f64)
}

fn check_grid(grid: &[f64], p_values: &[f64]) -> Result<(), StatsError> {
    if grid.len() != p_values.len() {
        return Err(StatsError::LengthMismatch { grid: grid.len(), p_values: p_values.len() });
    }
    if let Some(i) = (1..grid.len()).find(|&i| !(grid[i] > grid[i - 1])) {
        return Err(StatsError::NotAscending { index: i, value: grid[i] });
    }
    if let Some(&p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidPValue(p));
    }
    Ok(())
}

/// Largest grid level whose p-value is at most `alpha`, i.e. the weakest bias
/// at which the method is still not better than the baseline.
pub fn detect_breaking_point(grid: &[f64], p_values: &[f64], alpha: f64) -> Result<Option<f64>, StatsError> {
    check_grid(grid, p_values)?;
    Ok(grid.iter().zip(p_values).rev().find(|(_, &p)| p <= alpha).map(|(&g, _)| g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakingPointReport {
    pub method: String,
    pub grid: Vec<f64>,
    pub p_values: Vec<f64>,
    pub alpha: f64,
    pub breaking_point: Option<f64>,
}

impl BreakingPointReport {
    pub fn new(method: impl Into<String>, grid: Vec<f64>, p_values: Vec<f64>, alpha: f64) -> Result<Self, StatsError> {
        let breaking_point = detect_breaking_point(&grid, &p_values, alpha)?;
        Ok(BreakingPointReport { method: method.into(), grid, p_values, alpha, breaking_point })
    }

    pub const CSV_HEADER: &'static str = "method,level,p,rejected";

    /// One `method,level,p,rejected` row per grid level, no header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (g, p) in self.grid.iter().zip(&self.p_values) {
            writeln!(out, "{},{g:?},{p:?},{}", self.method, *p <= self.alpha).expect("write to string");
        }
        out
    }
}

pub fn reports_to_csv(reports: &[BreakingPointReport]) -> String {
    let mut out = format!("{}\n", BreakingPointReport::CSV_HEADER);
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}
