//! Ground-truth preference mathematics for a population of annotator types.
//!
//! Everything here is a pure function of its inputs. Rewards are stored per
//! `(prompt, response, type)`, policies as per-prompt logits, and pairwise
//! preferences follow a (possibly tempered) logistic link applied to reward
//! gaps and then mixed over the type distribution.

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Real};

/// Family of the link function. Only the logistic (Bradley-Terry) family is
/// supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinkKind {
    #[default]
    Logistic,
}

/// What [`Link::eval`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkMode {
    Value,
    FirstDeriv,
    SecondDeriv,
    Inverse,
}

/// Logistic link `σ_t(z) = 1 / (1 + exp(-z/t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link<F> {
    pub kind: LinkKind,
    temperature: F,
}

impl<F: Real> Default for Link<F> {
    fn default() -> Self {
        Self::logistic()
    }
}

impl<F: Real> Link<F> {
    pub fn logistic() -> Self {
        Self {
            kind: LinkKind::Logistic,
            temperature: F::one(),
        }
    }

    pub fn with_temperature(temperature: F) -> Result<Self> {
        if !(temperature > F::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "link temperature must be positive and finite, got {temperature}"
            )));
        }
        Ok(Self {
            kind: LinkKind::Logistic,
            temperature,
        })
    }

    pub fn temperature(&self) -> F {
        self.temperature
    }

    #[inline]
    pub fn value(&self, z: F) -> F {
        sigmoid(z / self.temperature)
    }

    #[inline]
    pub fn first_deriv(&self, z: F) -> F {
        let s = self.value(z);
        s * (F::one() - s) / self.temperature
    }

    #[inline]
    pub fn second_deriv(&self, z: F) -> F {
        let s = self.value(z);
        let two = F::lit(2.0);
        s * (F::one() - s) * (F::one() - two * s) / (self.temperature * self.temperature)
    }

    /// Third derivative; needed when differentiating a second-order correction.
    #[inline]
    pub fn third_deriv(&self, z: F) -> F {
        let s = self.value(z);
        let six = F::lit(6.0);
        let t = self.temperature;
        s * (F::one() - s) * (F::one() - six * s + six * s * s) / (t * t * t)
    }

    pub fn inverse(&self, p: F) -> Result<F> {
        if !(p > F::zero() && p < F::one()) {
            return Err(Error::Domain(format!(
                "link inverse requires a probability in (0,1), got {p}"
            )));
        }
        Ok(self.temperature * (p / (F::one() - p)).ln())
    }

    pub fn eval(&self, z: F, mode: LinkMode) -> Result<F> {
        Ok(match mode {
            LinkMode::Value => self.value(z),
            LinkMode::FirstDeriv => self.first_deriv(z),
            LinkMode::SecondDeriv => self.second_deriv(z),
            LinkMode::Inverse => return self.inverse(z),
        })
    }
}

/// Annotator types with their population shares.
#[derive(Debug, Clone, PartialEq)]
pub struct UserPopulation<F> {
    types: Vec<String>,
    weights: Vec<F>,
}

impl<F: Real> UserPopulation<F> {
    pub fn new(types: Vec<String>, weights: Vec<F>) -> Result<Self> {
        if types.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} type names but {} weights",
                types.len(),
                weights.len()
            )));
        }
        if types.is_empty() {
            return Err(Error::InvalidArgument("population needs at least one type".into()));
        }
        if weights.iter().any(|w| !(*w >= F::zero()) || !w.is_finite()) {
            return Err(Error::InvalidArgument("type weights must be finite and nonnegative".into()));
        }
        let total: F = weights.iter().copied().sum();
        if (total - F::one()).abs() > F::lit(1e-12).max(F::epsilon() * F::lit(8.0)) {
            return Err(Error::InvalidArgument(format!(
                "type weights must sum to 1, got {total}"
            )));
        }
        Ok(Self { types, weights })
    }

    /// Normalizes arbitrary nonnegative weights before validation.
    pub fn from_unnormalized(types: Vec<String>, weights: Vec<F>) -> Result<Self> {
        let total: F = weights.iter().copied().sum();
        if !(total > F::zero()) {
            return Err(Error::InvalidArgument("type weights sum to zero".into()));
        }
        Self::new(types, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        let w = F::one() / F::from_count(k.max(1));
        Self::new((0..k).map(|u| format!("type{u}")).collect(), vec![w; k])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn is_uniform(&self, tol: F) -> bool {
        let w0 = F::one() / F::from_count(self.len());
        self.weights.iter().all(|w| (*w - w0).abs() <= tol)
    }
}

/// Ground-truth reward `r(x, y; u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable<F> {
    values: Array3<F>,
}

impl<F: Real> RewardTable<F> {
    /// `values` is indexed `[prompt, response, type]`.
    pub fn new(values: Array3<F>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward table entries must be finite".into()));
        }
        let (nx, ny, nu) = values.dim();
        if nx == 0 || ny == 0 || nu == 0 {
            return Err(Error::Shape("reward table has an empty dimension".into()));
        }
        Ok(Self { values })
    }

    /// Single-prompt table from rows `[response][type]`.
    pub fn single_prompt(rows: &[Vec<F>]) -> Result<Self> {
        let ny = rows.len();
        let nu = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != nu) {
            return Err(Error::Shape("ragged reward rows".into()));
        }
        let values = Array3::from_shape_fn((1, ny, nu), |(_, y, u)| rows[y][u]);
        Self::new(values)
    }

    pub fn n_prompts(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_responses(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_types(&self) -> usize {
        self.values.dim().2
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, u: usize) -> F {
        self.values[[x, y, u]]
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }

    /// Rewards of one type, indexed `[prompt, response]`.
    pub fn type_slice(&self, u: usize) -> Array2<F> {
        self.values.index_axis(Axis(2), u).to_owned()
    }

    /// Population-weighted average reward `r̄(x, y)`.
    pub fn average(&self, pop: &UserPopulation<F>) -> Result<Array2<F>> {
        self.check_population(pop)?;
        let (nx, ny, _) = self.values.dim();
        Ok(Array2::from_shape_fn((nx, ny), |(x, y)| {
            pop.weights()
                .iter()
                .enumerate()
                .map(|(u, w)| *w * self.values[[x, y, u]])
                .sum()
        }))
    }

    pub fn check_population(&self, pop: &UserPopulation<F>) -> Result<()> {
        if pop.len() != self.n_types() {
            return Err(Error::Shape(format!(
                "population has {} types, reward table has {}",
                pop.len(),
                self.n_types()
            )));
        }
        Ok(())
    }

    fn check_indices(&self, x: usize, ys: &[usize]) -> Result<()> {
        if x >= self.n_prompts() {
            return Err(Error::InvalidArgument(format!("prompt index {x} out of range")));
        }
        if let Some(y) = ys.iter().find(|&&y| y >= self.n_responses()) {
            return Err(Error::InvalidArgument(format!("response index {y} out of range")));
        }
        Ok(())
    }
}

/// Tabular policy: per-prompt categorical distribution stored as logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy<F> {
    logits: Array2<F>,
}

impl<F: Real> Policy<F> {
    pub fn from_logits(logits: Array2<F>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy logits must be finite".into()));
        }
        if logits.ncols() == 0 || logits.nrows() == 0 {
            return Err(Error::Shape("policy has an empty dimension".into()));
        }
        Ok(Self { logits })
    }

    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            logits: Array2::zeros((n_prompts, n_responses)),
        }
    }

    /// Builds a policy from strictly positive probabilities (logits = ln p).
    pub fn from_probs(probs: &Array2<F>) -> Result<Self> {
        if probs.iter().any(|p| !(*p > F::zero())) {
            return Err(Error::Domain("policy probabilities must be positive".into()));
        }
        Self::from_logits(probs.mapv(F::ln))
    }

    pub fn logits(&self) -> &Array2<F> {
        &self.logits
    }

    pub fn into_logits(self) -> Array2<F> {
        self.logits
    }

    pub fn n_prompts(&self) -> usize {
        self.logits.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.logits.ncols()
    }

    /// Per-prompt log-softmax.
    pub fn log_probs(&self) -> Array2<F> {
        let mut out = self.logits.clone();
        for mut row in out.rows_mut() {
            let lse = log_sum_exp(row.view());
            row.mapv_inplace(|v| v - lse);
        }
        out
    }

    pub fn probs(&self) -> Array2<F> {
        softmax_rows(&self.logits)
    }

    pub fn log_prob(&self, x: usize, y: usize) -> F {
        self.logits[[x, y]] - log_sum_exp(self.logits.row(x))
    }

    pub fn prob(&self, x: usize, y: usize) -> F {
        self.log_prob(x, y).exp()
    }
}

pub fn log_sum_exp<F: Real>(row: ArrayView1<'_, F>) -> F {
    let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
    if m == F::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z: F = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Per-prompt distribution `D(·|x)` used to draw alternatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution<F> {
    probs: Array2<F>,
}

impl<F: Real> SamplingDistribution<F> {
    pub fn new(probs: Array2<F>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= F::zero()) || !p.is_finite()) {
            return Err(Error::InvalidArgument("sampling probabilities must be nonnegative".into()));
        }
        let tol = F::lit(1e-12).max(F::epsilon() * F::from_count(probs.ncols() * 4));
        for (x, row) in probs.rows().into_iter().enumerate() {
            let s: F = row.sum();
            if (s - F::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "sampling distribution row {x} sums to {s}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_prompts: usize, n_responses: usize) -> Self {
        Self {
            probs: Array2::from_elem(
                (n_prompts, n_responses),
                F::one() / F::from_count(n_responses),
            ),
        }
    }

    /// Same distribution for every prompt.
    pub fn repeated(row: &[F], n_prompts: usize) -> Result<Self> {
        Self::new(Array2::from_shape_fn((n_prompts, row.len()), |(_, y)| row[y]))
    }

    pub fn probs(&self) -> &Array2<F> {
        &self.probs
    }

    pub fn row(&self, x: usize) -> ArrayView1<'_, F> {
        self.probs.row(x)
    }
}

/// Square matrix with `P[i][j] = Pr(i ≻ j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseMatrix<F> {
    entries: Array2<F>,
}

impl<F: Real> PairwiseMatrix<F> {
    /// Wraps arbitrary entries without checking the complement identity.
    /// Useful for crafted LP instances.
    pub fn from_entries(entries: Array2<F>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Shape("pairwise matrix must be square".into()));
        }
        Ok(Self { entries })
    }

    /// Mixture-of-logistic matrix from `rewards[option][type]`.
    pub fn from_rewards(rewards: &Array2<F>, weights: &[F], link: &Link<F>) -> Result<Self> {
        if rewards.ncols() != weights.len() {
            return Err(Error::Shape(format!(
                "{} reward columns but {} weights",
                rewards.ncols(),
                weights.len()
            )));
        }
        let n = rewards.nrows();
        let half = F::lit(0.5);
        let entries = Array2::from_shape_fn((n, n), |(i, j)| {
            if i == j {
                half
            } else {
                weights
                    .iter()
                    .enumerate()
                    .map(|(u, w)| *w * link.value(rewards[[i, u]] - rewards[[j, u]]))
                    .sum()
            }
        });
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> F {
        self.entries[[i, j]]
    }

    pub fn entries(&self) -> &Array2<F> {
        &self.entries
    }

    /// Borda-style score `Σ_j D(j)·P[i][j]` for every option.
    pub fn scores(&self, dist: &[F]) -> Result<Vec<F>> {
        if dist.len() != self.len() {
            return Err(Error::Shape("distribution length differs from matrix size".into()));
        }
        Ok(self
            .entries
            .rows()
            .into_iter()
            .map(|row| row.iter().zip(dist).map(|(p, d)| *p * *d).sum())
            .collect())
    }
}

/// Whose preference [`pref_prob`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    PerType(usize),
    Marginal,
}

/// Probability that `y1` is preferred over `y2` at prompt `x`.
///
/// The per-type value is `σ(r(y1;u) − r(y2;u))`, the marginal value mixes
/// those over the population.
pub fn pref_prob<F: Real>(
    r: &RewardTable<F>,
    pop: &UserPopulation<F>,
    link: &Link<F>,
    x: usize,
    y1: usize,
    y2: usize,
    scope: Scope,
) -> Result<F> {
    r.check_indices(x, &[y1, y2])?;
    r.check_population(pop)?;
    let gap = |u: usize| r.get(x, y1, u) - r.get(x, y2, u);
    match scope {
        Scope::PerType(u) => {
            if u >= r.n_types() {
                return Err(Error::InvalidArgument(format!("type index {u} out of range")));
            }
            Ok(link.value(gap(u)))
        }
        Scope::Marginal => Ok(pop
            .weights()
            .iter()
            .enumerate()
            .map(|(u, w)| *w * link.value(gap(u)))
            .sum()),
    }
}

/// Pairwise preference matrix for one prompt.
pub fn pairwise_for_prompt<F: Real>(
    r: &RewardTable<F>,
    pop: &UserPopulation<F>,
    link: &Link<F>,
    x: usize,
) -> Result<PairwiseMatrix<F>> {
    r.check_indices(x, &[])?;
    r.check_population(pop)?;
    let rewards = r.values.index_axis(Axis(0), x).to_owned();
    PairwiseMatrix::from_rewards(&rewards, pop.weights(), link)
}

/// Normalized Borda count of every response at prompt `x`. The comparison of
/// a response with itself counts as a coin flip.
pub fn nbc<F: Real>(
    r: &RewardTable<F>,
    pop: &UserPopulation<F>,
    link: &Link<F>,
    dist: &SamplingDistribution<F>,
    x: usize,
) -> Result<Vec<F>> {
    if dist.probs().dim() != (r.n_prompts(), r.n_responses()) {
        return Err(Error::Shape("sampling distribution does not match reward table".into()));
    }
    let p = pairwise_for_prompt(r, pop, link, x)?;
    let d = dist.row(x).to_vec();
    p.scores(&d)
}

/// KL-regularized optimum `π*(y|x) ∝ π_ref(y|x)·exp(r̄(x,y)/β)`.
pub fn optimal_policy<F: Real>(
    r: &RewardTable<F>,
    pop: &UserPopulation<F>,
    pi_ref: &Policy<F>,
    beta: F,
) -> Result<Policy<F>> {
    if !(beta > F::zero()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if pi_ref.logits().dim() != (r.n_prompts(), r.n_responses()) {
        return Err(Error::Shape("reference policy does not match reward table".into()));
    }
    let avg = r.average(pop)?;
    let ref_lp = pi_ref.log_probs();
    let mut logits = &ref_lp + &avg.mapv(|v| v / beta);
    for mut row in logits.rows_mut() {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    Policy::from_logits(logits)
}

/// Induced reward difference
/// `β·ln(π(y2)/π_ref(y2)) − β·ln(π(y1)/π_ref(y1))`.
///
/// Only logit differences enter, so normalizers cancel.
pub fn induced_reward_diff<F: Real>(
    pi: &Policy<F>,
    pi_ref: &Policy<F>,
    beta: F,
    x: usize,
    y1: usize,
    y2: usize,
) -> F {
    let l = pi.logits();
    let lr = pi_ref.logits();
    beta * ((l[[x, y2]] - l[[x, y1]]) - (lr[[x, y2]] - lr[[x, y1]]))
}

/// Products of pairwise probabilities around the cycle `i → j → k → i` and
/// its reverse. Equal for any single Bradley-Terry model.
pub fn cycle_products<F: Real>(p: &PairwiseMatrix<F>, i: usize, j: usize, k: usize) -> Result<(F, F)> {
    if i == j || j == k || i == k {
        return Err(Error::InvalidArgument("cycle indices must be distinct".into()));
    }
    if [i, j, k].iter().any(|&v| v >= p.len()) {
        return Err(Error::InvalidArgument("cycle index out of range".into()));
    }
    let forward = p.get(i, j) * p.get(j, k) * p.get(k, i);
    let reverse = p.get(i, k) * p.get(k, j) * p.get(j, i);
    Ok((forward, reverse))
}

/// Descending ordering with tie groups.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Ranking {
    /// Indices in descending score order, ties broken by ascending index.
    pub order: Vec<usize>,
    /// Consecutive runs of `order` whose neighbouring scores differ by at most `tol`.
    pub groups: Vec<Vec<usize>>,
}

impl Ranking {
    pub fn top(&self) -> Option<&[usize]> {
        self.groups.first().map(Vec::as_slice)
    }

    /// Position of the tie group containing `idx`.
    pub fn group_of(&self, idx: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&idx))
    }
}

pub fn rank<F: Real>(scores: &[F], tol: F) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut prev: Option<usize> = None;
    for &i in &order {
        match (prev, groups.last_mut()) {
            (Some(p), Some(g)) if (scores[p] - scores[i]).abs() <= tol => g.push(i),
            _ => groups.push(vec![i]),
        }
        prev = Some(i);
    }
    // deterministic order inside a group
    for g in &mut groups {
        g.sort_unstable();
    }
    let order = groups.iter().flatten().copied().collect();
    Ranking { order, groups }
}
