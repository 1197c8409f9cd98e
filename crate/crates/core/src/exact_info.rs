//! Exact entropies and mutual informations of small finite joint distributions
//! over a feature `Z`, a target `Y` and a protected attribute `A`.
//!
//! Every quantity is reported in nats. `0 ln 0` is taken as `0`, and
//! conditioning events of probability zero contribute nothing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance applied when validating that a distribution sums to one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum InfoError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("axes must be distinct, got {0:?}")]
    RepeatedAxis(Vec<Axis>),
    #[error("alphabet sizes must be positive, got {0:?}")]
    InvalidSizes([usize; 3]),
    #[error("concentration must be positive and finite, got {0}")]
    InvalidConcentration(f64),
}

/// One of the three variables of a [`JointPmf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Z,
    Y,
    A,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::A => 2,
        }
    }

    fn bit(self) -> u8 {
        1 << self.index()
    }
}

/// A set of axes, used for joint entropies such as `H(Y | Z, A)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AxisSet(u8);

impl AxisSet {
    pub fn of(axes: &[Axis]) -> Self {
        AxisSet(axes.iter().fold(0, |acc, a| acc | a.bit()))
    }

    pub fn contains(self, axis: Axis) -> bool {
        self.0 & axis.bit() != 0
    }

    pub fn union(self, other: AxisSet) -> AxisSet {
        AxisSet(self.0 | other.0)
    }

    pub fn intersects(self, other: AxisSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl From<Axis> for AxisSet {
    fn from(axis: Axis) -> Self {
        AxisSet(axis.bit())
    }
}

/// Exact joint distribution `p(z, y, a)` stored row-major with `a` fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointPmfDoc", into = "JointPmfDoc")]
pub struct JointPmf {
    sizes: [usize; 3],
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JointPmfDoc {
    sizes: [usize; 3],
    probs: Vec<f64>,
}

impl TryFrom<JointPmfDoc> for JointPmf {
    type Error = InfoError;

    fn try_from(doc: JointPmfDoc) -> Result<Self, Self::Error> {
        JointPmf::new(doc.sizes, doc.probs)
    }
}

impl From<JointPmf> for JointPmfDoc {
    fn from(pmf: JointPmf) -> Self {
        JointPmfDoc {
            sizes: pmf.sizes,
            probs: pmf.probs,
        }
    }
}

impl JointPmf {
    /// Validates and wraps a flat row-major probability table.
    pub fn new(sizes: [usize; 3], probs: Vec<f64>) -> Result<Self, InfoError> {
        if sizes.iter().any(|&s| s == 0) {
            return Err(InfoError::InvalidSizes(sizes));
        }
        let expected = sizes[0] * sizes[1] * sizes[2];
        if probs.len() != expected {
            return Err(InfoError::InvalidDistribution(format!(
                "sizes {:?} need {} entries, got {}",
                sizes,
                expected,
                probs.len()
            )));
        }
        validate_probs(&probs)?;
        Ok(JointPmf { sizes, probs })
    }

    /// Builds a table from `f(z, y, a)`; the values must already form a distribution.
    pub fn from_fn(
        sizes: [usize; 3],
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, InfoError> {
        let mut probs = Vec::with_capacity(sizes.iter().product());
        for z in 0..sizes[0] {
            for y in 0..sizes[1] {
                for a in 0..sizes[2] {
                    probs.push(f(z, y, a));
                }
            }
        }
        JointPmf::new(sizes, probs)
    }

    /// Empirical distribution of observed `(z, y, a)` triples.
    pub fn from_counts(sizes: [usize; 3], counts: &[u64]) -> Result<Self, InfoError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(InfoError::InvalidDistribution("no observations".into()));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        JointPmf::new(sizes, probs)
    }

    pub fn sizes(&self) -> [usize; 3] {
        self.sizes
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, z: usize, y: usize, a: usize) -> f64 {
        self.probs[(z * self.sizes[1] + y) * self.sizes[2] + a]
    }

    /// Marginal over the axes in `keep`, flattened in Z, Y, A order.
    pub fn marginal(&self, keep: AxisSet) -> Vec<f64> {
        let dims: Vec<usize> = (0..3)
            .map(|i| {
                if keep.0 & (1 << i) != 0 {
                    self.sizes[i]
                } else {
                    1
                }
            })
            .collect();
        let mut out = vec![0.0; dims.iter().product()];
        for z in 0..self.sizes[0] {
            for y in 0..self.sizes[1] {
                for a in 0..self.sizes[2] {
                    let idx = [z, y, a];
                    let pos = (0..3).fold(0, |acc, i| {
                        acc * dims[i] + if dims[i] == 1 { 0 } else { idx[i] }
                    });
                    out[pos] += self.get(z, y, a);
                }
            }
        }
        out
    }

    /// Joint entropy `H(S)` of the axes in `set`; zero for the empty set.
    pub fn joint_entropy(&self, set: AxisSet) -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        entropy_unchecked(&self.marginal(set))
    }

    /// `H(T | G)` for arbitrary disjoint axis sets.
    pub fn conditional_entropy_of(
        &self,
        target: AxisSet,
        given: AxisSet,
    ) -> Result<f64, InfoError> {
        if target.is_empty() || target.intersects(given) {
            return Err(InfoError::RepeatedAxis(axes_of(target.union(given))));
        }
        if given.is_empty() {
            return Ok(self.joint_entropy(target));
        }
        // Σ_g p(g) H(T | G = g), skipping p(g) = 0.
        let joint = self.marginal(target.union(given));
        let target_dims = self.set_dims(target);
        let given_dims = self.set_dims(given);
        let all = target.union(given);
        let mut sum = 0.0;
        for g in 0..given_dims.iter().product::<usize>() {
            let g_idx = unravel(g, &given_dims);
            let mut row = Vec::with_capacity(target_dims.iter().product());
            for t in 0..target_dims.iter().product::<usize>() {
                let t_idx = unravel(t, &target_dims);
                row.push(joint[self.flat_index(all, target, &t_idx, given, &g_idx)]);
            }
            let pg: f64 = row.iter().sum();
            if pg > 0.0 {
                let h: f64 = row
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| {
                        let q = p / pg;
                        -q * q.ln()
                    })
                    .sum();
                sum += pg * h;
            }
        }
        Ok(sum)
    }

    /// `I(S1; S2 | W)` for pairwise-disjoint, nonempty `S1`, `S2`.
    pub fn mutual_information_of(
        &self,
        first: AxisSet,
        second: AxisSet,
        given: AxisSet,
    ) -> Result<f64, InfoError> {
        if first.is_empty()
            || second.is_empty()
            || first.intersects(second)
            || first.intersects(given)
            || second.intersects(given)
        {
            return Err(InfoError::RepeatedAxis(
                [axes_of(first), axes_of(second), axes_of(given)].concat(),
            ));
        }
        let h = self.conditional_entropy_of(first, given)?;
        let h_cond = self.conditional_entropy_of(first, second.union(given))?;
        Ok(h - h_cond)
    }

    fn set_dims(&self, set: AxisSet) -> Vec<usize> {
        (0..3)
            .filter(|i| set.0 & (1 << i) != 0)
            .map(|i| self.sizes[i])
            .collect()
    }

    // Position inside the marginal over `all` of the cell whose `target` and
    // `given` coordinates are supplied (each listed in Z, Y, A order).
    fn flat_index(
        &self,
        all: AxisSet,
        target: AxisSet,
        t_idx: &[usize],
        given: AxisSet,
        g_idx: &[usize],
    ) -> usize {
        let (mut ti, mut gi) = (0, 0);
        let mut pos = 0;
        for i in 0..3 {
            if all.0 & (1 << i) == 0 {
                continue;
            }
            let coord = if target.0 & (1 << i) != 0 {
                ti += 1;
                t_idx[ti - 1]
            } else {
                debug_assert!(given.0 & (1 << i) != 0);
                gi += 1;
                g_idx[gi - 1]
            };
            pos = pos * self.sizes[i] + coord;
        }
        pos
    }
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for i in (0..dims.len()).rev() {
        idx[i] = flat % dims[i];
        flat /= dims[i];
    }
    idx
}

fn axes_of(set: AxisSet) -> Vec<Axis> {
    [Axis::Z, Axis::Y, Axis::A]
        .into_iter()
        .filter(|a| set.contains(*a))
        .collect()
}

fn validate_probs(probs: &[f64]) -> Result<(), InfoError> {
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(InfoError::InvalidDistribution(format!(
            "entry {p} is negative or not finite"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(InfoError::InvalidDistribution(format!(
            "entries sum to {total}, not 1"
        )));
    }
    Ok(())
}

fn entropy_unchecked(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        // Folding from +0 keeps a certain outcome at 0 rather than -0.
        .fold(0.0, |acc, v| acc + v)
}

/// Shannon entropy `-Σ p ln p` of a marginal distribution.
pub fn entropy(probs: &[f64]) -> Result<f64, InfoError> {
    validate_probs(probs)?;
    Ok(entropy_unchecked(probs))
}

/// Binary entropy `H_b(p)` in nats.
pub fn binary_entropy(p: f64) -> f64 {
    entropy_unchecked(&[p, 1.0 - p])
}

/// `H(target | given)`.
pub fn conditional_entropy(joint: &JointPmf, target: Axis, given: Axis) -> Result<f64, InfoError> {
    if target == given {
        return Err(InfoError::RepeatedAxis(vec![target, given]));
    }
    joint.conditional_entropy_of(target.into(), given.into())
}

/// `I(first; second)`.
pub fn mutual_information(joint: &JointPmf, first: Axis, second: Axis) -> Result<f64, InfoError> {
    if first == second {
        return Err(InfoError::RepeatedAxis(vec![first, second]));
    }
    joint.mutual_information_of(first.into(), second.into(), AxisSet::default())
}

/// `I(first; second | given)`.
pub fn conditional_mi(
    joint: &JointPmf,
    first: Axis,
    second: Axis,
    given: Axis,
) -> Result<f64, InfoError> {
    if first == second || first == given || second == given {
        return Err(InfoError::RepeatedAxis(vec![first, second, given]));
    }
    joint.mutual_information_of(first.into(), second.into(), given.into())
}

/// Interaction information `I(Z;Y;A) = I(Z;Y) - I(Z;Y|A)`; may be negative.
pub fn interaction_information(joint: &JointPmf) -> f64 {
    let izy = joint
        .mutual_information_of(Axis::Z.into(), Axis::Y.into(), AxisSet::default())
        .expect("distinct axes");
    let izy_a = joint
        .mutual_information_of(Axis::Z.into(), Axis::Y.into(), Axis::A.into())
        .expect("distinct axes");
    izy - izy_a
}

/// The three terms of `I(Z;Y) <= I(Z;A) + H(Y|A)` and their slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundMargin {
    pub izy: f64,
    pub iza: f64,
    pub hya: f64,
    pub margin: f64,
}

pub fn bound_margin(joint: &JointPmf) -> BoundMargin {
    let izy = mutual_information(joint, Axis::Z, Axis::Y).expect("distinct axes");
    let iza = mutual_information(joint, Axis::Z, Axis::A).expect("distinct axes");
    let hya = conditional_entropy(joint, Axis::Y, Axis::A).expect("distinct axes");
    BoundMargin {
        izy,
        iza,
        hya,
        margin: iza + hya - izy,
    }
}

/// Slack of the sharper intermediate inequality
/// `I(Z;Y) + H(Y|Z,A) <= I(Z;A) + H(Y|A)`.
pub fn strong_bound_margin(joint: &JointPmf) -> f64 {
    let b = bound_margin(joint);
    let hy_za = joint
        .conditional_entropy_of(Axis::Y.into(), AxisSet::of(&[Axis::Z, Axis::A]))
        .expect("disjoint axes");
    b.margin - hy_za
}

/// Checks `I(Z;Y;A) <= min{I(Z;Y), I(Y;A), I(Z;A)}` within `1e-9`.
pub fn interaction_min_property(joint: &JointPmf) -> bool {
    let ii = interaction_information(joint);
    let izy = mutual_information(joint, Axis::Z, Axis::Y).expect("distinct axes");
    let iya = mutual_information(joint, Axis::Y, Axis::A).expect("distinct axes");
    let iza = mutual_information(joint, Axis::Z, Axis::A).expect("distinct axes");
    ii <= izy.min(iya).min(iza) + 1e-9
}

/// Dirichlet-distributed random joint, reproducible for a fixed seed.
pub fn random_joint(sizes: [usize; 3], concentration: f64, seed: u64) -> Result<JointPmf, InfoError> {
    if sizes.iter().any(|&s| s == 0) {
        return Err(InfoError::InvalidSizes(sizes));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(InfoError::InvalidConcentration(concentration));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|_| InfoError::InvalidConcentration(concentration))?;
    let cells: usize = sizes.iter().product();
    let mut raw: Vec<f64> = (0..cells).map(|_| gamma.sample(&mut rng)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.iter_mut().for_each(|p| *p /= total);
    } else {
        // Tiny concentrations can underflow every draw.
        raw.iter_mut().for_each(|p| *p = 0.0);
        raw[0] = 1.0;
    }
    JointPmf::new(sizes, raw)
}

/// Joint with `Y = g(A)` and `Z` independent of `A`:
/// `p(z, y, a) = p(z) p(a) 1[y = g(a)]`.
pub fn extreme_bias_joint(
    pz: &[f64],
    pa: &[f64],
    g: &[usize],
    y_size: usize,
) -> Result<JointPmf, InfoError> {
    if g.len() != pa.len() || g.iter().any(|&y| y >= y_size) {
        return Err(InfoError::InvalidDistribution(
            "g must map every attribute value into the target alphabet".into(),
        ));
    }
    validate_probs(pz)?;
    validate_probs(pa)?;
    JointPmf::from_fn([pz.len(), y_size, pa.len()], |z, y, a| {
        if g[a] == y {
            pz[z] * pa[a]
        } else {
            0.0
        }
    })
}

/// Outcome of checking the bound over a corpus of random joints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub joints: usize,
    pub min_margin: f64,
    pub min_strong_margin: f64,
    /// Joints whose margin or strong margin falls below `-1e-9`.
    pub violations: usize,
}

/// Tolerance for the exact inequalities, absorbing floating-point error.
pub const BOUND_TOLERANCE: f64 = 1e-9;

fn corpus_sizes(rng: &mut ChaCha8Rng, max_alphabet: usize) -> [usize; 3] {
    [(); 3].map(|_| rng.random_range(2..=max_alphabet))
}

fn check_max_alphabet(max_alphabet: usize) -> Result<(), InfoError> {
    if max_alphabet < 2 {
        return Err(InfoError::InvalidSizes([max_alphabet; 3]));
    }
    Ok(())
}

/// Checks `bound_margin` and `strong_bound_margin` on `count` Dirichlet
/// joints with alphabets drawn from `2..=max_alphabet` per axis and
/// concentrations log-uniform in `[0.05, 5]`, so near-deterministic joints are
/// covered too.
pub fn bound_corpus(count: usize, max_alphabet: usize, seed: u64) -> Result<CorpusSummary, InfoError> {
    check_max_alphabet(max_alphabet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = CorpusSummary { joints: count, min_margin: f64::INFINITY, min_strong_margin: f64::INFINITY, violations: 0 };
    for _ in 0..count {
        let sizes = corpus_sizes(&mut rng, max_alphabet);
        let concentration = (rng.random_range(0.05f64.ln()..5f64.ln())).exp();
        let joint = random_joint(sizes, concentration, rng.random())?;
        let m = bound_margin(&joint).margin;
        let strong = strong_bound_margin(&joint);
        out.min_margin = out.min_margin.min(m);
        out.min_strong_margin = out.min_strong_margin.min(strong);
        if m < -BOUND_TOLERANCE || strong < -BOUND_TOLERANCE {
            out.violations += 1;
        }
    }
    Ok(out)
}

/// Outcome of checking the extreme-bias case over random constructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeBiasSummary {
    pub joints: usize,
    pub max_izy: f64,
    /// Joints with `I(Z;Y) > 1e-9`.
    pub violations: usize,
}

/// Builds `count` joints with `Y = g(A)` and `Z` independent of `A` (random
/// marginals, random `g`) and checks `I(Z;Y) = 0` on each.
pub fn extreme_bias_corpus(count: usize, max_alphabet: usize, seed: u64) -> Result<ExtremeBiasSummary, InfoError> {
    check_max_alphabet(max_alphabet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
    let draw = |k: usize, rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..k).map(|_| gamma.sample(rng) + 1e-12).collect();
        let t: f64 = v.iter().sum();
        v.into_iter().map(|x| x / t).collect::<Vec<f64>>()
    };
    let mut out = ExtremeBiasSummary { joints: count, max_izy: 0.0, violations: 0 };
    for _ in 0..count {
        let [nz, ny, na] = corpus_sizes(&mut rng, max_alphabet);
        let pz = draw(nz, &mut rng);
        let pa = draw(na, &mut rng);
        let g: Vec<usize> = (0..na).map(|_| rng.random_range(0..ny)).collect();
        let joint = extreme_bias_joint(&pz, &pa, &g, ny)?;
        let izy = mutual_information(&joint, Axis::Z, Axis::Y)?;
        out.max_izy = out.max_izy.max(izy);
        if izy > BOUND_TOLERANCE {
            out.violations += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn xor_triple() -> JointPmf {
        JointPmf::from_fn([2, 2, 2], |z, y, a| if y == z ^ a { 0.25 } else { 0.0 }).unwrap()
    }

    fn copies() -> JointPmf {
        JointPmf::from_fn([2, 2, 2], |z, y, a| if z == y && y == a { 0.5 } else { 0.0 }).unwrap()
    }

    fn independent_uniform() -> JointPmf {
        JointPmf::from_fn([2, 2, 2], |_, _, _| 0.125).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.5, 0.5]).unwrap() - 0.693147).abs() < 1e-6);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        // -(0.25 ln 0.25 + 0.75 ln 0.75)
        assert!((entropy(&[0.25, 0.75]).unwrap() - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_invalid() {
        assert!(matches!(
            entropy(&[-0.1, 1.1]),
            Err(InfoError::InvalidDistribution(_))
        ));
        assert!(entropy(&[0.5, 0.4]).is_err());
        assert!(entropy(&[0.5, 0.5 + 1e-10]).is_ok());
    }

    #[test]
    fn conditional_entropy_examples() {
        let diag = JointPmf::from_fn([1, 2, 2], |_, y, a| if y == a { 0.5 } else { 0.0 }).unwrap();
        assert!(conditional_entropy(&diag, Axis::Y, Axis::A).unwrap().abs() < 1e-15);
        let indep = independent_uniform();
        assert!((conditional_entropy(&indep, Axis::Y, Axis::A).unwrap() - LN2).abs() < 1e-12);

        let pa = [0.4167, 0.5833];
        let py1 = [0.02, 0.24];
        let celeb = JointPmf::from_fn([1, 2, 2], |_, y, a| {
            pa[a] * if y == 1 { py1[a] } else { 1.0 - py1[a] }
        })
        .unwrap();
        let h = conditional_entropy(&celeb, Axis::Y, Axis::A).unwrap();
        assert!((h - 0.362).abs() < 1e-3, "{h}");
        assert!(conditional_entropy(&celeb, Axis::A, Axis::A).is_err());
    }

    #[test]
    fn mutual_information_examples() {
        assert!(mutual_information(&independent_uniform(), Axis::Z, Axis::Y).unwrap().abs() < 1e-12);
        let zy = JointPmf::from_fn([2, 2, 1], |z, y, _| if z == y { 0.5 } else { 0.0 }).unwrap();
        assert!((mutual_information(&zy, Axis::Z, Axis::Y).unwrap() - LN2).abs() < 1e-12);
        assert!(mutual_information(&xor_triple(), Axis::Z, Axis::Y).unwrap().abs() < 1e-12);
        assert!(mutual_information(&zy, Axis::Y, Axis::Y).is_err());
    }

    #[test]
    fn conditional_mi_examples() {
        assert!((conditional_mi(&xor_triple(), Axis::Z, Axis::Y, Axis::A).unwrap() - LN2).abs() < 1e-12);
        let y_indep = JointPmf::from_fn([2, 2, 2], |z, _, a| {
            let pz = [0.3, 0.7][z];
            let pa = if z == a { 0.8 } else { 0.2 };
            pz * pa * 0.5
        })
        .unwrap();
        assert!(conditional_mi(&y_indep, Axis::Z, Axis::Y, Axis::A).unwrap().abs() < 1e-12);
        let zy_a = JointPmf::from_fn([2, 2, 2], |z, y, _| if z == y { 0.25 } else { 0.0 }).unwrap();
        assert!((conditional_mi(&zy_a, Axis::Z, Axis::Y, Axis::A).unwrap() - LN2).abs() < 1e-12);
        assert!(conditional_mi(&zy_a, Axis::Z, Axis::Z, Axis::A).is_err());
        assert!(conditional_mi(&zy_a, Axis::Z, Axis::Y, Axis::Y).is_err());
    }

    #[test]
    fn interaction_information_examples() {
        assert!((interaction_information(&xor_triple()) + LN2).abs() < 1e-12);
        assert!(interaction_information(&independent_uniform()).abs() < 1e-12);
        assert!((interaction_information(&copies()) - LN2).abs() < 1e-12);
    }

    #[test]
    fn bound_margin_examples() {
        let b = bound_margin(&xor_triple());
        assert!(b.izy.abs() < 1e-12 && b.iza.abs() < 1e-12);
        assert!((b.hya - LN2).abs() < 1e-12 && (b.margin - LN2).abs() < 1e-12);

        let degenerate = extreme_bias_joint(&[0.3, 0.7], &[0.5, 0.5], &[1, 0], 2).unwrap();
        let b = bound_margin(&degenerate);
        for v in [b.izy, b.iza, b.hya, b.margin] {
            assert!(v.abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn strong_margin_examples() {
        // Slack equals I(Z;A) - I(Z;Y;A) = 0 - (-ln 2) for XOR.
        assert!((strong_bound_margin(&xor_triple()) - LN2).abs() < 1e-12);
        assert!(strong_bound_margin(&copies()).abs() < 1e-12);
        assert!(strong_bound_margin(&independent_uniform()).abs() < 1e-12);
    }

    #[test]
    fn interaction_min_examples() {
        assert!(interaction_min_property(&xor_triple()));
        assert!(interaction_min_property(&copies()));
    }

    #[test]
    fn random_joint_contract() {
        let p = random_joint([1, 1, 1], 1.0, 3).unwrap();
        assert_eq!(p.probs(), &[1.0]);
        assert_eq!(bound_margin(&p).margin, 0.0);
        let a = random_joint([2, 2, 2], 1.0, 42).unwrap();
        let b = random_joint([2, 2, 2], 1.0, 42).unwrap();
        assert_eq!(a, b);
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(random_joint([0, 2, 2], 1.0, 1).is_err());
        assert!(random_joint([2, 2, 2], 0.0, 1).is_err());
        assert!(random_joint([2, 2, 2], 1e-300, 1).is_ok());
    }

    #[test]
    fn json_document_shape() {
        let p = xor_triple();
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.starts_with("{\"sizes\":[2,2,2],\"probs\":["));
        let back: JointPmf = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<JointPmf>("{\"sizes\":[1,1,2],\"probs\":[0.7,0.7]}").is_err());
    }

    #[test]
    fn marginal_layout() {
        let p = JointPmf::from_fn([2, 3, 2], |z, y, a| (1 + z + 2 * y + 6 * a) as f64 / 78.0).unwrap();
        let mz = p.marginal(Axis::Z.into());
        assert_eq!(mz.len(), 2);
        let mya = p.marginal(AxisSet::of(&[Axis::Y, Axis::A]));
        assert!((mya[1 * 2 + 1] - (p.get(0, 1, 1) + p.get(1, 1, 1))).abs() < 1e-15);
    }
}
