//! Training objectives over tabular policy logits.
//!
//! Every objective depends on the policy only through the induced reward gap
//! `h(l, w) = β[(θ_w − θ_l) − (ln π_ref(w) − ln π_ref(l))]`, whose gradient
//! with respect to the logits of prompt `x` is `β(e_w − e_l)`. Per-sample
//! losses are therefore scalar functions of `h` and gradients scatter into two
//! entries of one row.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::{AnonymousSample, FullAnnotationSample, PairedSample};
use crate::error::{Error, Result};
use crate::preference::{Link, Policy};
use crate::scalar::{ln_sigmoid, sigmoid, Real};

/// Cap on the estimated variance term when `σ'(h)` underflows.
pub const V_MAX: f64 = 100.0;

/// Triples with fewer paired observations are flagged as low confidence.
pub const DEFAULT_MIN_COUNT: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig<F> {
    pub beta: F,
    /// Strength of the second-order correction.
    pub alpha: F,
    /// Floor inside the stable logarithm.
    pub eps_log: F,
    /// Treat `σ'(h)^-2` in the variance term as a constant.
    pub detach_variance: bool,
}

impl<F: Real> Default for LossConfig<F> {
    fn default() -> Self {
        Self {
            beta: F::one(),
            alpha: F::one(),
            eps_log: F::lit(1e-8),
            detach_variance: false,
        }
    }
}

impl<F: Real> LossConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > F::zero()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha >= F::zero()) {
            return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.eps_log > F::zero() && self.eps_log < F::lit(0.5)) {
            return Err(Error::InvalidArgument(format!("eps_log must lie in (0, 0.5), got {}", self.eps_log)));
        }
        Ok(())
    }
}

/// Loss value, gradient with respect to the logits, and the number of
/// samples whose variance term hit [`V_MAX`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<F> {
    pub loss: F,
    pub grad: Array2<F>,
    pub clamped: usize,
}

/// A differentiable objective over policy logits.
pub trait Objective<F: Real> {
    type Sample: Clone + Send + Sync;

    /// Weighted mean loss and its gradient. `weights` defaults to all ones.
    fn loss_grad(&self, logits: &Array2<F>, samples: &[Self::Sample], weights: Option<&[F]>) -> Result<LossGrad<F>>;

    fn loss(&self, logits: &Array2<F>, samples: &[Self::Sample], weights: Option<&[F]>) -> Result<F> {
        self.loss_grad(logits, samples, weights).map(|g| g.loss)
    }
}

/// Shared plumbing: reference log-probabilities, β, and the weighted sum.
struct GapContext<'a, F> {
    ref_logp: &'a Array2<F>,
    beta: F,
}

impl<F: Real> GapContext<'_, F> {
    #[inline]
    fn gap(&self, logits: &Array2<F>, x: usize, loser: usize, winner: usize) -> F {
        self.beta
            * ((logits[[x, winner]] - logits[[x, loser]])
                - (self.ref_logp[[x, winner]] - self.ref_logp[[x, loser]]))
    }

    fn check(&self, logits: &Array2<F>) -> Result<()> {
        if logits.dim() != self.ref_logp.dim() {
            return Err(Error::Shape(format!(
                "logits {:?} do not match reference policy {:?}",
                logits.dim(),
                self.ref_logp.dim()
            )));
        }
        Ok(())
    }
}

fn check_index<F>(logits: &Array2<F>, x: usize, a: usize, b: usize) -> Result<()> {
    let (nx, ny) = logits.dim();
    if x >= nx || a >= ny || b >= ny {
        return Err(Error::InvalidArgument(format!(
            "sample ({x},{a},{b}) outside the {nx}x{ny} policy"
        )));
    }
    Ok(())
}

fn total_weight<F: Real>(n: usize, weights: Option<&[F]>) -> Result<F> {
    match weights {
        None => Ok(F::from_count(n)),
        Some(w) => {
            if w.len() != n {
                return Err(Error::Shape(format!("{} weights for {} samples", w.len(), n)));
            }
            let total: F = w.iter().copied().sum();
            if !(total > F::zero()) {
                return Err(Error::InvalidArgument("sample weights sum to zero".into()));
            }
            Ok(total)
        }
    }
}

/// Accumulates `Σ w_i ℓ_i(h_i)` and scatters `w_i ℓ_i'(h_i)·β(e_w − e_l)`.
fn accumulate<F: Real, S>(
    ctx: &GapContext<'_, F>,
    logits: &Array2<F>,
    samples: &[S],
    weights: Option<&[F]>,
    // returns (x, loser, winner, loss, dloss/dh, clamped) or None for a
    // sample that contributes nothing
    mut per_sample: impl FnMut(&S, &dyn Fn(usize, usize, usize) -> F) -> Result<Option<(usize, usize, usize, F, F, bool)>>,
) -> Result<LossGrad<F>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ctx.check(logits)?;
    let total = total_weight(samples.len(), weights)?;
    let mut loss = F::zero();
    let mut grad = Array2::zeros(logits.dim());
    let mut clamped = 0;
    let gap = |x, l, w| ctx.gap(logits, x, l, w);
    for (i, s) in samples.iter().enumerate() {
        let w = weights.map_or(F::one(), |ws| ws[i]);
        if w == F::zero() {
            continue;
        }
        if let Some((x, l, win, value, dh, hit)) = per_sample(s, &gap)? {
            loss += w * value;
            let g = w * dh * ctx.beta;
            grad[[x, win]] += g;
            grad[[x, l]] -= g;
            clamped += usize::from(hit);
        }
    }
    let inv = F::one() / total;
    grad.mapv_inplace(|g| g * inv);
    Ok(LossGrad {
        loss: loss * inv,
        grad,
        clamped,
    })
}

/// `−ln σ(h)` and its derivative.
#[inline]
fn dpo_term<F: Real>(h: F) -> (F, F) {
    (-ln_sigmoid(h), -sigmoid(-h))
}

/// Standard DPO negative log-likelihood.
#[derive(Debug, Clone)]
pub struct Dpo<F> {
    ref_logp: Array2<F>,
    cfg: LossConfig<F>,
}

impl<F: Real> Dpo<F> {
    pub fn new(pi_ref: &Policy<F>, cfg: LossConfig<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ref_logp: pi_ref.log_probs(),
            cfg,
        })
    }

    fn ctx(&self) -> GapContext<'_, F> {
        GapContext {
            ref_logp: &self.ref_logp,
            beta: self.cfg.beta,
        }
    }
}

impl<F: Real> Objective<F> for Dpo<F> {
    type Sample = AnonymousSample;

    fn loss_grad(&self, logits: &Array2<F>, samples: &[AnonymousSample], weights: Option<&[F]>) -> Result<LossGrad<F>> {
        accumulate(&self.ctx(), logits, samples, weights, |s, gap| {
            check_index(logits, s.x, s.y1, s.y2)?;
            let (l, w) = s.loser_winner();
            let (v, d) = dpo_term(gap(s.x, l, w));
            Ok(Some((s.x, l, w, v, d, false)))
        })
    }
}

/// Paired-label counts of one unordered triple. Orientation: `o = 1` means
/// the larger response index won.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub n11: u64,
    pub n10: u64,
    pub n01: u64,
    pub n00: u64,
}

impl PairCounts {
    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }
}

/// Second-moment estimates for one oriented triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointMoments<F> {
    /// Estimate of `E_u[σ(Δr)^2]` in the queried orientation.
    pub j1: F,
    /// Estimate of `E_u[σ(Δr)(1 − σ(Δr))]`.
    pub j2: F,
    pub count: u64,
    pub low_confidence: bool,
}

impl<F: Real> JointMoments<F> {
    /// `J1 − (J1 + J2)^2`, the across-type variance of the win probability.
    pub fn variance_numerator(&self) -> F {
        let m = self.j1 + self.j2;
        self.j1 - m * m
    }
}

/// Tabular joint likelihood estimates from same-annotator label pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointLikelihoodTable {
    counts: BTreeMap<(usize, usize, usize), PairCounts>,
    min_count: u64,
}

impl JointLikelihoodTable {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn min_count(&self) -> u64 {
        self.min_count
    }

    pub fn counts(&self) -> impl Iterator<Item = (&(usize, usize, usize), &PairCounts)> {
        self.counts.iter()
    }

    /// Moments for the orientation where `o = 1` means `y2` beat `y1`.
    pub fn moments<F: Real>(&self, x: usize, y1: usize, y2: usize) -> Option<JointMoments<F>> {
        let (a, b, flipped) = if y1 < y2 { (y1, y2, false) } else { (y2, y1, true) };
        let c = self.counts.get(&(x, a, b))?;
        let n = c.total();
        if n == 0 {
            return None;
        }
        let nf = F::from_u64(n).expect("count representable");
        let both = if flipped { c.n00 } else { c.n11 };
        let j1 = F::from_u64(both).expect("count representable") / nf;
        let j2 = F::from_u64(c.n10 + c.n01).expect("count representable") / (F::lit(2.0) * nf);
        Some(JointMoments {
            j1,
            j2,
            count: n,
            low_confidence: n < self.min_count,
        })
    }
}

/// Counts label agreement patterns per triple. Both orientations of a triple
/// share one entry.
pub fn estimate_joint(paired: &[PairedSample], min_count: u64) -> Result<JointLikelihoodTable> {
    let mut counts: BTreeMap<(usize, usize, usize), PairCounts> = BTreeMap::new();
    for (i, p) in paired.iter().enumerate() {
        let (f, s) = (p.first, p.second);
        if (f.x, f.y1, f.y2) != (s.x, s.y1, s.y2) {
            return Err(Error::InvalidArgument(format!(
                "paired record {i} labels two different triples"
            )));
        }
        if f.y1 == f.y2 {
            return Err(Error::InvalidArgument(format!("paired record {i} compares a response with itself")));
        }
        let (a, b) = (f.y1.min(f.y2), f.y1.max(f.y2));
        let orient = |o: u8| if f.y1 < f.y2 { o } else { 1 - o };
        let c = counts.entry((f.x, a, b)).or_default();
        match (orient(f.o), orient(s.o)) {
            (1, 1) => c.n11 += 1,
            (1, 0) => c.n10 += 1,
            (0, 1) => c.n01 += 1,
            _ => c.n00 += 1,
        }
    }
    Ok(JointLikelihoodTable { counts, min_count })
}

/// DPO with the second-order correction `σ(h) + (α/2)·σ''(h)·V`, where
/// `V = (J1 − (J1+J2)^2) / σ'(h)^2`.
#[derive(Debug, Clone)]
pub struct CorrectedDpo<F> {
    ref_logp: Array2<F>,
    cfg: LossConfig<F>,
    joint: JointLikelihoodTable,
    link: Link<F>,
}

impl<F: Real> CorrectedDpo<F> {
    pub fn new(pi_ref: &Policy<F>, joint: JointLikelihoodTable, cfg: LossConfig<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ref_logp: pi_ref.log_probs(),
            cfg,
            joint,
            link: Link::logistic(),
        })
    }

    pub fn joint(&self) -> &JointLikelihoodTable {
        &self.joint
    }

    /// Variance estimate at gap `h` for a given numerator; the flag reports
    /// whether the cap was applied.
    pub fn variance(&self, numerator: F, h: F) -> (F, bool) {
        estimated_variance(&self.link, numerator, h)
    }

    /// Per-sample loss and derivative w.r.t. `h`.
    fn term(&self, h: F, numerator: F) -> (F, F, bool) {
        let alpha = self.cfg.alpha;
        if alpha == F::zero() || numerator == F::zero() {
            let (v, d) = dpo_term(h);
            return (v, d, false);
        }
        let link = &self.link;
        let half_alpha = alpha / F::lit(2.0);
        let s = link.value(h);
        let d1 = link.first_deriv(h);
        let (var, hit) = estimated_variance(link, numerator, h);
        let p = s + half_alpha * link.second_deriv(h) * var;
        let dp = if self.cfg.detach_variance || hit {
            d1 + half_alpha * var * link.third_deriv(h)
        } else {
            // σ''/σ'^2 = (1 − 2s)/(s(1 − s)) for the unit-temperature logistic
            let q = s * (F::one() - s);
            let two = F::lit(2.0);
            d1 + half_alpha * numerator * (-F::one() + two * s - two * s * s) / q
        };
        if p > self.cfg.eps_log {
            (-p.ln(), -dp / p, hit)
        } else {
            (-self.cfg.eps_log.ln(), F::zero(), hit)
        }
    }
}

/// `(J1 − (J1+J2)^2) / σ'(h)^2`, capped at ±[`V_MAX`].
pub fn estimated_variance<F: Real>(link: &Link<F>, numerator: F, h: F) -> (F, bool) {
    let d1 = link.first_deriv(h);
    let v = numerator / (d1 * d1);
    let cap = F::lit(V_MAX);
    if !v.is_finite() || v.abs() > cap {
        (cap.copysign(numerator), true)
    } else {
        (v, false)
    }
}

impl<F: Real> Objective<F> for CorrectedDpo<F> {
    type Sample = AnonymousSample;

    fn loss_grad(&self, logits: &Array2<F>, samples: &[AnonymousSample], weights: Option<&[F]>) -> Result<LossGrad<F>> {
        let ctx = GapContext {
            ref_logp: &self.ref_logp,
            beta: self.cfg.beta,
        };
        let out = accumulate(&ctx, logits, samples, weights, |s, gap| {
            check_index(logits, s.x, s.y1, s.y2)?;
            let (l, w) = s.loser_winner();
            let numerator = self
                .joint
                .moments::<F>(s.x, l, w)
                .map_or(F::zero(), |m| m.variance_numerator());
            let (v, d, hit) = self.term(gap(s.x, l, w), numerator);
            Ok(Some((s.x, l, w, v, d, hit)))
        })?;
        if out.clamped > 0 {
            log::debug!("variance term capped on {} samples", out.clamped);
        }
        Ok(out)
    }
}

/// Orientation of an agreed full-annotation record: `(loser, winner)`.
fn agreed_pair(s: &FullAnnotationSample) -> Option<(usize, usize)> {
    match s.consensus()? {
        1 => Some((s.y1, s.y2)),
        _ => Some((s.y2, s.y1)),
    }
}

/// Temperature-|U| DPO on unanimous records; disagreements contribute
/// nothing. Normalized by the total record count.
#[derive(Debug, Clone)]
pub struct ConsistentAgreement<F> {
    ref_logp: Array2<F>,
    cfg: LossConfig<F>,
}

impl<F: Real> ConsistentAgreement<F> {
    pub fn new(pi_ref: &Policy<F>, cfg: LossConfig<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ref_logp: pi_ref.log_probs(),
            cfg,
        })
    }
}

impl<F: Real> Objective<F> for ConsistentAgreement<F> {
    type Sample = FullAnnotationSample;

    fn loss_grad(&self, logits: &Array2<F>, samples: &[FullAnnotationSample], weights: Option<&[F]>) -> Result<LossGrad<F>> {
        let ctx = GapContext {
            ref_logp: &self.ref_logp,
            beta: self.cfg.beta,
        };
        accumulate(&ctx, logits, samples, weights, |s, gap| {
            check_index(logits, s.x, s.y1, s.y2)?;
            let Some((l, w)) = agreed_pair(s) else {
                return Ok(None);
            };
            let k = F::from_count(s.o_vec.len());
            let (v, d) = dpo_term(k * gap(s.x, l, w));
            Ok(Some((s.x, l, w, v, k * d, false)))
        })
    }
}

/// `I(θ) = ∫_1^θ ((1 − t)/t)^k dt`, by binomial expansion of `(1 − t)^k`.
pub fn agreement_integral<F: Real>(theta: F, k: u32) -> F {
    let mut acc = F::zero();
    let mut binom = F::one();
    for j in 0..=k {
        if j > 0 {
            binom = binom * F::from_u32(k - j + 1).unwrap() / F::from_u32(j).unwrap();
        }
        let sign = if j % 2 == 0 { F::one() } else { -F::one() };
        // ∫ t^(j-k) dt
        let e = j as i32 - k as i32 + 1;
        let term = if e == 0 {
            theta.ln()
        } else {
            let ef = F::from_i32(e).unwrap();
            (theta.powi(e) - F::one()) / ef
        };
        acc += sign * binom * term;
    }
    acc
}

/// `dI/dθ = (1/θ − 1)^k`.
pub fn agreement_integrand<F: Real>(theta: F, k: u32) -> F {
    (F::one() / theta - F::one()).powi(k as i32)
}

/// Alternative consistent loss `−[s + I(s)]` with `s = σ(h)` on unanimous
/// records.
#[derive(Debug, Clone)]
pub struct AltConsistent<F> {
    ref_logp: Array2<F>,
    cfg: LossConfig<F>,
}

impl<F: Real> AltConsistent<F> {
    pub fn new(pi_ref: &Policy<F>, cfg: LossConfig<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ref_logp: pi_ref.log_probs(),
            cfg,
        })
    }
}

impl<F: Real> Objective<F> for AltConsistent<F> {
    type Sample = FullAnnotationSample;

    fn loss_grad(&self, logits: &Array2<F>, samples: &[FullAnnotationSample], weights: Option<&[F]>) -> Result<LossGrad<F>> {
        let ctx = GapContext {
            ref_logp: &self.ref_logp,
            beta: self.cfg.beta,
        };
        let eps = self.cfg.eps_log;
        accumulate(&ctx, logits, samples, weights, |s, gap| {
            check_index(logits, s.x, s.y1, s.y2)?;
            let Some((l, w)) = agreed_pair(s) else {
                return Ok(None);
            };
            let k = s.o_vec.len() as u32;
            let raw = sigmoid(gap(s.x, l, w));
            let lo = eps;
            let hi = F::one() - eps;
            let sv = raw.max(lo).min(hi);
            let value = -(sv + agreement_integral(sv, k));
            let d = if raw < lo || raw > hi {
                F::zero()
            } else {
                -(F::one() + agreement_integrand(sv, k)) * sv * (F::one() - sv)
            };
            Ok(Some((s.x, l, w, value, d, false)))
        })
    }
}

/// Settings for per-type Bradley-Terry reward fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MleConfig<F> {
    pub steps: usize,
    pub lr: F,
}

impl<F: Real> Default for MleConfig<F> {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: F::lit(0.05),
        }
    }
}

/// Per-type reward estimates and their population average.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFit<F> {
    /// `[prompt, response, type]`, zero-mean per `(prompt, type)` over
    /// identified responses.
    pub per_type: ndarray::Array3<F>,
    /// `Σ_u w_u r̂(x, y; u)`, zero-mean per prompt.
    pub average: Array2<F>,
    /// `(prompt, response, type)` entries never observed; kept at zero.
    pub unidentified: Vec<(usize, usize, usize)>,
}

/// Fits one Bradley-Terry reward table per annotator type by gradient descent
/// on the negative log-likelihood, then averages with the population weights.
///
/// `per_type[u]` holds type `u`'s comparisons and optional sample weights.
pub fn per_type_reward_mle<F: Real>(
    per_type: &[(Vec<AnonymousSample>, Option<Vec<F>>)],
    pop_weights: &[F],
    n_prompts: usize,
    n_responses: usize,
    cfg: &MleConfig<F>,
) -> Result<RewardFit<F>> {
    use crate::optim::{train, LrSchedule, TrainConfig};

    if per_type.len() != pop_weights.len() {
        return Err(Error::Shape(format!(
            "{} per-type datasets for {} type weights",
            per_type.len(),
            pop_weights.len()
        )));
    }
    let k = per_type.len();
    let reference = Policy::uniform(n_prompts, n_responses);
    let bt = Dpo::new(
        &reference,
        LossConfig {
            beta: F::one(),
            alpha: F::zero(),
            ..LossConfig::default()
        },
    )?;
    let mut rewards = ndarray::Array3::zeros((n_prompts, n_responses, k));
    let mut unidentified = Vec::new();
    for (u, (samples, weights)) in per_type.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        // collapse to (x, loser, winner) totals; full-batch descent only needs these
        let mut agg: BTreeMap<(usize, usize, usize), F> = BTreeMap::new();
        let mut seen = Array2::from_elem((n_prompts, n_responses), false);
        for (i, s) in samples.iter().enumerate() {
            if s.x >= n_prompts || s.y1 >= n_responses || s.y2 >= n_responses {
                return Err(Error::InvalidArgument(format!(
                    "sample ({},{},{}) outside the {n_prompts}x{n_responses} table",
                    s.x, s.y1, s.y2
                )));
            }
            let w = weights.as_ref().map_or(F::one(), |w| w[i]);
            let (l, win) = s.loser_winner();
            *agg.entry((s.x, l, win)).or_insert(F::zero()) += w;
            seen[[s.x, s.y1]] = true;
            seen[[s.x, s.y2]] = true;
        }
        let (cmp, w): (Vec<_>, Vec<_>) = agg
            .into_iter()
            .map(|((x, l, win), w)| (AnonymousSample { x, y1: l, y2: win, o: 1 }, w))
            .unzip();
        let tc = TrainConfig {
            epochs: cfg.steps,
            batch_size: usize::MAX,
            schedule: LrSchedule::LinearDecay,
            adam: crate::optim::AdamConfig { lr: cfg.lr, ..Default::default() },
            ..TrainConfig::default()
        };
        let fit = train(&bt, &cmp, Some(&w), &Array2::zeros((n_prompts, n_responses)), &tc)?;
        for x in 0..n_prompts {
            let ids: Vec<usize> = (0..n_responses).filter(|&y| seen[[x, y]]).collect();
            if ids.is_empty() {
                unidentified.extend((0..n_responses).map(|y| (x, y, u)));
                continue;
            }
            let mean = ids.iter().map(|&y| fit.params[[x, y]]).sum::<F>() / F::from_count(ids.len());
            for y in 0..n_responses {
                if seen[[x, y]] {
                    rewards[[x, y, u]] = fit.params[[x, y]] - mean;
                } else {
                    unidentified.push((x, y, u));
                }
            }
        }
    }
    let mut average = Array2::from_shape_fn((n_prompts, n_responses), |(x, y)| {
        pop_weights
            .iter()
            .enumerate()
            .map(|(u, w)| *w * rewards[[x, y, u]])
            .sum::<F>()
    });
    for mut row in average.rows_mut() {
        let m = row.sum() / F::from_count(n_responses);
        row.mapv_inplace(|v| v - m);
    }
    Ok(RewardFit {
        per_type: rewards,
        average,
        unidentified,
    })
}
