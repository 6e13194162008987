//! Circular discrete environment with shifted annotator types, plus the
//! experiment driver that trains each method and compares the result with the
//! KL-optimal policy and the Borda-count ordering.
//!
//! Prompts and responses both live on `Z_n`. Type `u` rewards response `y` at
//! prompt `x` by `scale_u · max(0, 1 − decay_u · d)`, where `d` is the circular
//! distance between `x + shift_u` and `y`. Everything depends only on
//! `δ = y − x (mod n)`, so results are summarized as 1D curves over `δ`.

use std::io::Write;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::datasets::{agreement_filter, relabel_with_reward, shard_seed, Generator, RelabelMode};
use crate::error::{Error, Result};
use crate::losses::{
    estimate_joint, per_type_reward_mle, AltConsistent, ConsistentAgreement, CorrectedDpo, Dpo, LossConfig, MleConfig,
    DEFAULT_MIN_COUNT,
};
use crate::optim::{fmt17, train, EpochRecord, TrainConfig};
use crate::preference::{nbc, optimal_policy, Link, Policy, RewardTable, SamplingDistribution, UserPopulation};
use crate::scalar::Real;

/// Tie tolerance on NBC scores for ordinal comparisons.
pub const DEFAULT_TIE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircularEnvConfig {
    pub n: usize,
    pub shifts: Vec<i64>,
    pub decays: Vec<f64>,
    pub scales: Vec<f64>,
    pub beta: f64,
}

impl Default for CircularEnvConfig {
    fn default() -> Self {
        Self {
            n: 40,
            shifts: vec![-10, 0, 10],
            decays: vec![0.075, 0.1, 0.075],
            scales: vec![4.0, 1.5, 4.0],
            beta: 1.0,
        }
    }
}

impl CircularEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidArgument(format!("n must be at least 2, got {}", self.n)));
        }
        let k = self.shifts.len();
        if k == 0 || self.decays.len() != k || self.scales.len() != k {
            return Err(Error::Shape(format!(
                "{} shifts, {} decays, {} scales",
                k,
                self.decays.len(),
                self.scales.len()
            )));
        }
        if self.decays.iter().chain(&self.scales).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("decays and scales must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidArgument("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn n_types(&self) -> usize {
        self.shifts.len()
    }

    pub fn population<F: Real>(&self) -> Result<UserPopulation<F>> {
        UserPopulation::new(
            self.shifts.iter().map(|s| format!("shift{s}")).collect(),
            vec![F::one() / F::from_count(self.n_types()); self.n_types()],
        )
    }

    pub fn reward_table<F: Real>(&self) -> Result<RewardTable<F>> {
        self.validate()?;
        let n = self.n;
        RewardTable::new(Array3::from_shape_fn((n, n, self.n_types()), |(x, y, u)| {
            env_reward(self, x, y, u)
        }))
    }
}

/// Circular distance between `a` and `b` on `Z_n`.
pub fn circular_distance(a: i64, b: i64, n: usize) -> usize {
    let n = n as i64;
    let d = (a - b).rem_euclid(n);
    d.min(n - d) as usize
}

pub fn env_reward<F: Real>(cfg: &CircularEnvConfig, x: usize, y: usize, u: usize) -> F {
    let d = circular_distance(x as i64 + cfg.shifts[u], y as i64, cfg.n) as f64;
    F::lit(cfg.scales[u] * (1.0 - cfg.decays[u] * d).max(0.0))
}

/// Mean and standard error over prompts at each offset `δ = y − x (mod n)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneDCurve<F> {
    pub mean: Vec<F>,
    pub stderr: Vec<F>,
}

impl<F: Real> OneDCurve<F> {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Value at a signed offset, wrapping around the circle.
    pub fn at(&self, delta: i64) -> F {
        self.mean[delta.rem_euclid(self.len() as i64) as usize]
    }

    /// `delta,mean,stderr` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "delta,mean,stderr")?;
        for (d, (m, s)) in self.mean.iter().zip(&self.stderr).enumerate() {
            writeln!(w, "{d},{},{}", fmt17(*m), fmt17(*s))?;
        }
        Ok(())
    }
}

pub fn reduce_1d<F: Real>(values: &Array2<F>) -> Result<OneDCurve<F>> {
    let (nx, ny) = values.dim();
    if nx != ny || nx == 0 {
        return Err(Error::Shape(format!("reduce_1d needs a square array, got {nx}x{ny}")));
    }
    let n = nx;
    let nf = F::from_count(n);
    let mut mean = Vec::with_capacity(n);
    let mut stderr = Vec::with_capacity(n);
    for delta in 0..n {
        let col: Vec<F> = (0..n).map(|x| values[[x, (x + delta) % n]]).collect();
        let m = col.iter().copied().sum::<F>() / nf;
        let se = if n > 1 {
            let var = col.iter().map(|v| (*v - m) * (*v - m)).sum::<F>() / F::from_count(n - 1);
            (var / nf).sqrt()
        } else {
            F::zero()
        };
        mean.push(m);
        stderr.push(se);
    }
    Ok(OneDCurve { mean, stderr })
}

/// Kendall τ restricted to pairs that are separated by more than the tie
/// tolerance in both curves. `tau` is `None` when no such pair exists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KendallTau {
    pub tau: Option<f64>,
    pub concordant: usize,
    pub discordant: usize,
    pub tied: usize,
}

pub fn ordinal_metrics<F: Real>(a: &[F], b: &[F], tie_tol: F) -> Result<KendallTau> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("curves of length {} and {}", a.len(), b.len())));
    }
    let (mut concordant, mut discordant, mut tied) = (0, 0, 0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da.abs() <= tie_tol || db.abs() <= tie_tol {
                tied += 1;
            } else if (da > F::zero()) == (db > F::zero()) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let used = concordant + discordant;
    Ok(KendallTau {
        tau: (used > 0).then(|| (concordant as f64 - discordant as f64) / used as f64),
        concordant,
        discordant,
        tied,
    })
}

/// Mean over prompts of `KL(π(·|x) ‖ π*(·|x))`.
pub fn mean_kl<F: Real>(p: &Array2<F>, q: &Array2<F>) -> F {
    let rows = p.nrows();
    let total: F = p
        .rows()
        .into_iter()
        .zip(q.rows())
        .map(|(pr, qr)| {
            pr.iter()
                .zip(qr.iter())
                .filter(|(pv, _)| **pv > F::zero())
                .map(|(pv, qv)| *pv * (*pv / *qv).ln())
                .sum::<F>()
        })
        .sum();
    total / F::from_count(rows)
}

/// Training method for [`run_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Method {
    Dpo,
    CorrectedDpo { alpha: f64 },
    Consistent,
    AltConsistent,
    AvgRewardRelabel,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Dpo => "dpo".into(),
            Method::CorrectedDpo { alpha } => format!("corrected_dpo_alpha{alpha}"),
            Method::Consistent => "consistent".into(),
            Method::AltConsistent => "alt_consistent".into(),
            Method::AvgRewardRelabel => "avg_reward_relabel".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: CircularEnvConfig,
    pub n_samples: usize,
    pub seed: u64,
    pub train: TrainConfig<f64>,
    pub eps_log: f64,
    pub detach_variance: bool,
    pub min_count: u64,
    pub tie_tol: f64,
    pub relabel_mode: RelabelMode,
    pub mle: MleConfig<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: CircularEnvConfig::default(),
            n_samples: 500_000,
            seed: 0,
            train: TrainConfig::default(),
            eps_log: 1e-8,
            detach_variance: false,
            min_count: DEFAULT_MIN_COUNT,
            tie_tol: DEFAULT_TIE_TOL,
            relabel_mode: RelabelMode::Stochastic,
            mle: MleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub method: Method,
    pub n_samples: usize,
    pub seed: u64,
    pub kendall_vs_nbc: KendallTau,
    pub kendall_vs_optimal: KendallTau,
    pub kl_to_optimal: f64,
    /// Fraction of full-annotation records with unanimous labels.
    pub usable_fraction: Option<f64>,
    pub variance_clamped: usize,
    pub final_loss: f64,
    pub policy_curve: OneDCurve<f64>,
    pub optimal_curve: OneDCurve<f64>,
    pub nbc_curve: OneDCurve<f64>,
    pub reward_curve: OneDCurve<f64>,
    #[serde(skip)]
    pub policy: Array2<f64>,
    #[serde(skip)]
    pub trace: Vec<EpochRecord<f64>>,
}

impl ExperimentReport {
    pub fn curves(&self) -> [(&'static str, &OneDCurve<f64>); 4] {
        [
            ("policy", &self.policy_curve),
            ("optimal", &self.optimal_curve),
            ("nbc", &self.nbc_curve),
            ("avg_reward", &self.reward_curve),
        ]
    }
}

/// Ground-truth quantities of an environment that every method is compared
/// against.
pub struct Baselines {
    pub rewards: RewardTable<f64>,
    pub pop: UserPopulation<f64>,
    pub optimal: Array2<f64>,
    pub nbc: Array2<f64>,
}

pub fn baselines(env: &CircularEnvConfig) -> Result<Baselines> {
    let rewards = env.reward_table::<f64>()?;
    let pop = env.population::<f64>()?;
    let n = env.n;
    let pi_ref = Policy::uniform(n, n);
    let optimal = optimal_policy(&rewards, &pop, &pi_ref, env.beta)?.probs();
    let link = Link::logistic();
    let d = SamplingDistribution::uniform(n, n);
    let mut scores = Array2::zeros((n, n));
    for x in 0..n {
        for (y, s) in nbc(&rewards, &pop, &link, &d, x)?.into_iter().enumerate() {
            scores[[x, y]] = s;
        }
    }
    Ok(Baselines {
        rewards,
        pop,
        optimal,
        nbc: scores,
    })
}

/// Generates data for `method`, trains a policy from uniform logits, and
/// reports ordinal and divergence metrics.
pub fn run_experiment(method: Method, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.env.validate()?;
    let env = &cfg.env;
    let n = env.n;
    let base = baselines(env)?;
    let link = Link::logistic();
    let pi_ref = Policy::uniform(n, n);
    let prompt_dist = vec![1.0 / n as f64; n];
    let resp_dist = SamplingDistribution::uniform(n, n);
    let generator = Generator::new(&base.rewards, &base.pop, link, &prompt_dist, &resp_dist)?;
    let loss_cfg = LossConfig {
        beta: env.beta,
        alpha: 0.0,
        eps_log: cfg.eps_log,
        detach_variance: cfg.detach_variance,
    };
    let mut train_cfg = cfg.train;
    train_cfg.seed = shard_seed(cfg.seed, 10);
    let init = Array2::zeros((n, n));
    let seed = |k| shard_seed(cfg.seed, k);

    let mut usable_fraction = None;
    let outcome = match method {
        Method::Dpo => {
            let data = generator.sample_anonymous(cfg.n_samples, seed(0))?;
            train(&Dpo::new(&pi_ref, loss_cfg)?, &data, None, &init, &train_cfg)?
        }
        Method::CorrectedDpo { alpha } => {
            let data = generator.sample_anonymous(cfg.n_samples, seed(0))?;
            let paired = generator.sample_paired(cfg.n_samples, seed(1))?;
            let joint = estimate_joint(&paired, cfg.min_count)?;
            let objective = CorrectedDpo::new(&pi_ref, joint, LossConfig { alpha, ..loss_cfg })?;
            train(&objective, &data, None, &init, &train_cfg)?
        }
        Method::Consistent | Method::AltConsistent => {
            let full = generator.sample_full_vector(cfg.n_samples, seed(2))?;
            usable_fraction = Some(agreement_filter(&full).usable_fraction());
            if method == Method::Consistent {
                train(&ConsistentAgreement::new(&pi_ref, loss_cfg)?, &full, None, &init, &train_cfg)?
            } else {
                train(&AltConsistent::new(&pi_ref, loss_cfg)?, &full, None, &init, &train_cfg)?
            }
        }
        Method::AvgRewardRelabel => {
            let k = env.n_types();
            let per_type_n = (cfg.n_samples / k).max(1);
            let mut sets = Vec::with_capacity(k);
            for u in 0..k {
                let single = RewardTable::new(
                    base.rewards
                        .type_slice(u)
                        .insert_axis(ndarray::Axis(2)),
                )?;
                let one = UserPopulation::uniform(1)?;
                let g = Generator::new(&single, &one, link, &prompt_dist, &resp_dist)?;
                sets.push((g.sample_anonymous(per_type_n, shard_seed(seed(3), u as u64))?, None));
            }
            let fit = per_type_reward_mle(&sets, base.pop.weights(), n, n, &cfg.mle)?;
            let triples: Vec<_> = generator
                .sample_anonymous(cfg.n_samples, seed(0))?
                .into_iter()
                .map(|s| (s.x, s.y1, s.y2))
                .collect();
            let data = relabel_with_reward(&triples, &fit.average, &link, cfg.relabel_mode, seed(4))?;
            train(&Dpo::new(&pi_ref, loss_cfg)?, &data, None, &init, &train_cfg)?
        }
    };

    let policy = Policy::from_logits(outcome.params)?.probs();
    let policy_curve = reduce_1d(&policy)?;
    let optimal_curve = reduce_1d(&base.optimal)?;
    let nbc_curve = reduce_1d(&base.nbc)?;
    let reward_curve = reduce_1d(&base.rewards.average(&base.pop)?)?;
    Ok(ExperimentReport {
        method,
        n_samples: cfg.n_samples,
        seed: cfg.seed,
        kendall_vs_nbc: ordinal_metrics(&policy_curve.mean, &nbc_curve.mean, cfg.tie_tol)?,
        kendall_vs_optimal: ordinal_metrics(&policy_curve.mean, &optimal_curve.mean, cfg.tie_tol)?,
        kl_to_optimal: mean_kl(&policy, &base.optimal),
        usable_fraction,
        variance_clamped: outcome.clamped,
        final_loss: outcome.trace.last().map_or(f64::NAN, |r| r.loss),
        policy_curve,
        optimal_curve,
        nbc_curve,
        reward_curve,
        policy,
        trace: outcome.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn reward_examples() {
        let cfg = CircularEnvConfig::default();
        for u in 0..3 {
            for x in [0usize, 7, 33] {
                let y = (x as i64 + cfg.shifts[u]).rem_euclid(40) as usize;
                assert_eq!(env_reward::<f64>(&cfg, x, y, u), cfg.scales[u]);
            }
        }
        assert_eq!(env_reward::<f64>(&cfg, 0, 30, 0), 4.0);
        // d = 14 > 1/0.075
        assert_eq!(env_reward::<f64>(&cfg, 0, 16, 0), 0.0);
        assert_eq!(env_reward::<f64>(&cfg, 0, 10, 1), 0.0);
        assert_eq!(circular_distance(39, 0, 40), 1);
        assert_eq!(circular_distance(-10, 30, 40), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = CircularEnvConfig::default();
        c.decays.pop();
        assert!(c.validate().is_err());
        let c = CircularEnvConfig { n: 1, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn reduce_uniform_and_rewards() {
        let n = 12;
        let u = Array2::from_elem((n, n), 1.0 / n as f64);
        let c = reduce_1d(&u).unwrap();
        assert!(c.mean.iter().all(|m| (m - 1.0 / n as f64).abs() < 1e-15));
        assert!(c.stderr.iter().all(|s| *s == 0.0));

        let cfg = CircularEnvConfig::default();
        let r = cfg.reward_table::<f64>().unwrap();
        for u in 0..3 {
            let c = reduce_1d(&r.type_slice(u)).unwrap();
            assert!(c.stderr.iter().all(|s| *s < 1e-12));
            let peak = c.mean.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(c.at(cfg.shifts[u]), peak);
        }
        let pop = cfg.population::<f64>().unwrap();
        let avg = reduce_1d(&r.average(&pop).unwrap()).unwrap();
        assert!(avg.at(10) > avg.at(0));
        assert!(avg.at(-10) > avg.at(0));
        assert!(reduce_1d(&Array2::<f64>::zeros((2, 3))).is_err());
    }

    #[test]
    fn optimal_policy_is_reflection_symmetric() {
        let b = baselines(&CircularEnvConfig::default()).unwrap();
        let c = reduce_1d(&b.optimal).unwrap();
        for d in 0..40i64 {
            assert_abs_diff_eq!(c.at(d), c.at(-d), epsilon = 1e-10);
        }
        // NBC under uniform D averages to one half
        for x in 0..40 {
            let s: f64 = b.nbc.row(x).sum() / 40.0;
            assert_abs_diff_eq!(s, 0.5, epsilon = 1e-10);
        }
    }

    #[test]
    fn kendall_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ordinal_metrics(&a, &a, 0.0).unwrap().tau, Some(1.0));
        let r = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(ordinal_metrics(&a, &r, 0.0).unwrap().tau, Some(-1.0));
        let flat = [0.5; 4];
        let k = ordinal_metrics(&a, &flat, 1e-3).unwrap();
        assert_eq!(k.tau, None);
        assert_eq!(k.tied, 6);
        assert!(ordinal_metrics(&a, &a[..3], 0.0).is_err());
    }

    #[test]
    fn kl_is_zero_for_identical_policies() {
        let p = Array2::from_shape_vec((2, 2), vec![0.3, 0.7, 0.5, 0.5]).unwrap();
        assert_eq!(mean_kl(&p, &p), 0.0);
        let q = Array2::from_shape_vec((2, 2), vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(mean_kl(&p, &q) > 0.0);
    }

    #[test]
    fn small_experiment_runs_every_method() {
        let cfg = ExperimentConfig {
            env: CircularEnvConfig { n: 8, shifts: vec![-2, 0, 2], ..Default::default() },
            n_samples: 4000,
            seed: 3,
            train: TrainConfig { epochs: 3, batch_size: 256, ..TrainConfig::default() },
            mle: MleConfig { steps: 200, lr: 0.05 },
            ..ExperimentConfig::default()
        };
        for m in [
            Method::Dpo,
            Method::CorrectedDpo { alpha: 1.0 },
            Method::Consistent,
            Method::AltConsistent,
            Method::AvgRewardRelabel,
        ] {
            let r = run_experiment(m, &cfg).unwrap();
            assert_eq!(r.policy_curve.len(), 8);
            assert!(r.kl_to_optimal.is_finite());
            assert_eq!(r.usable_fraction.is_some(), matches!(m, Method::Consistent | Method::AltConsistent));
            let again = run_experiment(m, &cfg).unwrap();
            assert_eq!(r.policy, again.policy);
        }
    }
}
