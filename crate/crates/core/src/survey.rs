//! Survey-based distortion analysis: Luce-Shepard rewards per respondent group,
//! Borda-count versus average-reward rankings, and the minimum total-variation
//! change of the alternative distribution that flips a Borda-count pair.

pub mod simplex;

use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::fmt17;
use crate::preference::{rank, Link, PairwiseMatrix, Ranking};
use crate::scalar::Real;
use simplex::{simplex_solve, LpProblem, LpStatus, Sense};

pub const DEFAULT_SMOOTHING: f64 = 0.5;
/// Support floor and strictness margin of the flip program.
pub const DEFAULT_FLIP_EPS: f64 = 1e-5;
pub const DEFAULT_FLIP_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyGroup {
    pub name: String,
    pub weight: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyQuestion {
    pub id: String,
    pub options: Vec<String>,
    pub groups: Vec<SurveyGroup>,
}

impl SurveyQuestion {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::InvalidArgument(format!("question {}: fewer than two options", self.id)));
        }
        for g in &self.groups {
            if g.counts.len() != self.options.len() {
                return Err(Error::Shape(format!(
                    "question {}: group {} has {} counts for {} options",
                    self.id,
                    g.name,
                    g.counts.len(),
                    self.options.len()
                )));
            }
            if !(g.weight >= 0.0) || !g.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "question {}: group {} has invalid weight {}",
                    self.id, g.name, g.weight
                )));
            }
        }
        let live: f64 = self.live_groups().map(|g| g.weight).sum();
        if !(live > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "question {}: no group with positive weight and responses",
                self.id
            )));
        }
        Ok(())
    }

    /// Groups that have at least one response. Empty groups are dropped.
    pub fn live_groups(&self) -> impl Iterator<Item = &SurveyGroup> {
        self.groups.iter().filter(|g| g.counts.iter().any(|c| *c > 0))
    }
}

/// Reads newline-delimited question objects. Blank lines are skipped.
pub fn read_questions<R: BufRead>(reader: R) -> Result<Vec<SurveyQuestion>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: SurveyQuestion = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        q.validate()?;
        out.push(q);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LuceShepard<F> {
    /// `rewards[option][group]` as log choice probabilities.
    pub rewards: Array2<F>,
    /// Group weights renormalized over the kept groups.
    pub weights: Vec<F>,
    pub groups: Vec<String>,
    /// `(option, group)` entries with a zero count and no smoothing; their
    /// reward is `−∞`.
    pub flagged: Vec<(usize, usize)>,
}

pub fn luce_shepard_rewards<F: Real>(q: &SurveyQuestion, smoothing: F) -> Result<LuceShepard<F>> {
    q.validate()?;
    if !(smoothing >= F::zero()) || !smoothing.is_finite() {
        return Err(Error::InvalidArgument(format!("smoothing must be nonnegative, got {smoothing}")));
    }
    let kept: Vec<&SurveyGroup> = q.live_groups().collect();
    let n = q.options.len();
    let mut rewards = Array2::zeros((n, kept.len()));
    let mut flagged = Vec::new();
    for (u, g) in kept.iter().enumerate() {
        let total: F = g.counts.iter().map(|c| F::lit(*c as f64) + smoothing).sum();
        for (i, c) in g.counts.iter().enumerate() {
            let v = F::lit(*c as f64) + smoothing;
            if v == F::zero() {
                flagged.push((i, u));
            }
            rewards[[i, u]] = (v / total).ln();
        }
    }
    let wsum: f64 = kept.iter().map(|g| g.weight).sum();
    Ok(LuceShepard {
        rewards,
        weights: kept.iter().map(|g| F::lit(g.weight / wsum)).collect(),
        groups: kept.iter().map(|g| g.name.clone()).collect(),
        flagged,
    })
}

pub fn pairwise_matrix<F: Real>(rewards: &Array2<F>, weights: &[F], link: &Link<F>) -> Result<PairwiseMatrix<F>> {
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite(
            "rewards must be finite; use positive smoothing for zero counts".into(),
        ));
    }
    PairwiseMatrix::from_rewards(rewards, weights, link)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurveyRankings<F> {
    pub id: String,
    pub nbc_scores: Vec<F>,
    pub nbc_ranking: Ranking,
    pub avg_reward_scores: Vec<F>,
    pub avg_reward_ranking: Ranking,
}

/// Borda-count and average-reward rankings under `dist` (uniform when absent).
pub fn survey_rankings<F: Real>(
    q: &SurveyQuestion,
    dist: Option<&[F]>,
    smoothing: F,
    link: &Link<F>,
) -> Result<SurveyRankings<F>> {
    let ls = luce_shepard_rewards(q, smoothing)?;
    let p = pairwise_matrix(&ls.rewards, &ls.weights, link)?;
    let n = q.options.len();
    let uniform = vec![F::one() / F::from_count(n); n];
    let dist = dist.unwrap_or(&uniform);
    let nbc_scores = p.scores(dist)?;
    let avg_reward_scores: Vec<F> = ls
        .rewards
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&ls.weights).map(|(r, w)| *r * *w).sum())
        .collect();
    let tol = F::solver_tol();
    Ok(SurveyRankings {
        id: q.id.clone(),
        nbc_ranking: rank(&nbc_scores, tol),
        avg_reward_ranking: rank(&avg_reward_scores, tol),
        nbc_scores,
        avg_reward_scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipSolution<F> {
    /// Minimum total-variation distance from uniform, `None` when no
    /// full-support distribution flips the pair.
    pub tv: Option<F>,
    pub q: Option<Vec<F>>,
}

/// Smallest TV move away from the uniform distribution after which option
/// `j` beats option `i` in Borda count by at least `delta`, with every option
/// keeping probability at least `eps`.
pub fn min_tv_flip<F: Real>(p: &PairwiseMatrix<F>, i: usize, j: usize, eps: F, delta: F) -> Result<FlipSolution<F>> {
    let n = p.len();
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidArgument(format!("invalid pair ({i}, {j}) for {n} options")));
    }
    if !(eps > F::zero()) || !(delta > F::zero()) {
        return Err(Error::InvalidArgument("eps and delta must be positive".into()));
    }
    let uniform = vec![F::one() / F::from_count(n); n];
    let s = p.scores(&uniform)?;
    if !(s[i] > s[j]) {
        return Err(Error::InvalidArgument(format!(
            "option {i} does not beat option {j} under uniform ({} vs {})",
            s[i], s[j]
        )));
    }

    // variables: q_0..q_{n−1}, s_0..s_{n−1}
    let half = F::lit(0.5);
    let mut objective = vec![F::zero(); n];
    objective.extend(std::iter::repeat_n(half, n));
    let mut lower = vec![eps; n];
    lower.extend(std::iter::repeat_n(F::zero(), n));
    let mut lp = LpProblem::new(objective).with_lower(lower);
    let inv_n = F::one() / F::from_count(n);
    for k in 0..n {
        let mut plus = vec![F::zero(); 2 * n];
        plus[k] = F::one();
        plus[n + k] = F::one();
        lp.add(plus, Sense::Ge, inv_n);
        let mut minus = vec![F::zero(); 2 * n];
        minus[k] = -F::one();
        minus[n + k] = F::one();
        lp.add(minus, Sense::Ge, -inv_n);
    }
    let mut margin = vec![F::zero(); 2 * n];
    for k in 0..n {
        margin[k] = p.get(i, k) - p.get(j, k);
    }
    lp.add(margin, Sense::Le, -delta);
    let mut total = vec![F::one(); n];
    total.resize(2 * n, F::zero());
    lp.add(total, Sense::Eq, F::one());

    let sol = simplex_solve(&lp)?;
    Ok(match sol.status {
        LpStatus::Optimal => FlipSolution {
            tv: Some(sol.objective),
            q: Some(sol.x[..n].to_vec()),
        },
        _ => FlipSolution { tv: None, q: None },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuestionSensitivity<F> {
    pub id: String,
    pub n_options: usize,
    /// Ordered pairs `(i, j)` with `NBC_i > NBC_j` under uniform.
    pub strict_pairs: usize,
    /// Smallest flip distance over all strict pairs.
    pub min_tv: Option<F>,
    pub min_pair: Option<(usize, usize)>,
    /// Smallest flip distance among pairs whose winner is the top option,
    /// i.e. changes to the preferred choice.
    pub top_flip_tv: Option<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport<F> {
    pub questions: Vec<QuestionSensitivity<F>>,
    /// Ids of questions left out for having fewer than three options.
    pub skipped: Vec<String>,
    /// `(tv, cumulative fraction)` over analyzed questions, sorted by tv.
    pub cdf: Vec<(F, F)>,
}

impl<F: Real> SensitivityReport<F> {
    /// `tv,cumulative_fraction` with 17 significant digits.
    pub fn write_cdf_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "tv,cumulative_fraction")?;
        for (tv, frac) in &self.cdf {
            writeln!(w, "{},{}", fmt17(*tv), fmt17(*frac))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanConfig<F> {
    pub smoothing: F,
    pub eps: F,
    pub delta: F,
    /// Borda scores closer than this are not treated as a strict pair.
    pub strict_tol: F,
}

impl<F: Real> Default for ScanConfig<F> {
    fn default() -> Self {
        Self {
            smoothing: F::lit(DEFAULT_SMOOTHING),
            eps: F::lit(DEFAULT_FLIP_EPS),
            delta: F::lit(DEFAULT_FLIP_DELTA),
            strict_tol: F::solver_tol(),
        }
    }
}

pub fn question_sensitivity<F: Real>(
    q: &SurveyQuestion,
    link: &Link<F>,
    cfg: &ScanConfig<F>,
) -> Result<QuestionSensitivity<F>> {
    let ls = luce_shepard_rewards(q, cfg.smoothing)?;
    let p = pairwise_matrix(&ls.rewards, &ls.weights, link)?;
    let n = q.options.len();
    let scores = p.scores(&vec![F::one() / F::from_count(n); n])?;
    let top = scores.iter().copied().fold(F::neg_infinity(), F::max);
    let mut out = QuestionSensitivity {
        id: q.id.clone(),
        n_options: n,
        strict_pairs: 0,
        min_tv: None,
        min_pair: None,
        top_flip_tv: None,
    };
    for i in 0..n {
        for j in 0..n {
            if i == j || !(scores[i] > scores[j] + cfg.strict_tol) {
                continue;
            }
            out.strict_pairs += 1;
            let Some(tv) = min_tv_flip(&p, i, j, cfg.eps, cfg.delta)?.tv else {
                continue;
            };
            if out.min_tv.is_none_or(|m| tv < m) {
                out.min_tv = Some(tv);
                out.min_pair = Some((i, j));
            }
            if top - scores[i] <= cfg.strict_tol && out.top_flip_tv.is_none_or(|m| tv < m) {
                out.top_flip_tv = Some(tv);
            }
        }
    }
    Ok(out)
}

/// Runs [`question_sensitivity`] on every question with at least three options.
pub fn sensitivity_scan<F: Real>(
    questions: &[SurveyQuestion],
    link: &Link<F>,
    cfg: &ScanConfig<F>,
) -> Result<SensitivityReport<F>> {
    let mut analyzed = Vec::new();
    let mut skipped = Vec::new();
    for q in questions {
        if q.options.len() < 3 {
            skipped.push(q.id.clone());
        } else {
            analyzed.push(question_sensitivity(q, link, cfg)?);
        }
    }
    let mut tvs: Vec<F> = analyzed.iter().filter_map(|s| s.min_tv).collect();
    tvs.sort_by(|a, b| a.partial_cmp(b).expect("finite tv"));
    let total = F::from_count(analyzed.len());
    let cdf = tvs
        .into_iter()
        .enumerate()
        .map(|(k, tv)| (tv, F::from_count(k + 1) / total))
        .collect();
    Ok(SensitivityReport {
        questions: analyzed,
        skipped,
        cdf,
    })
}
