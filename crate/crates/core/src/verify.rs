//! Worked counterexamples evaluated end to end: majority dominance, an
//! irrelevant alternative, sampling-distribution and link-temperature
//! sensitivity, the mediocrity example, and the mixture cycle test.

use ndarray::Array2;
use serde::Serialize;

use crate::error::Result;
use crate::preference::{
    cycle_products, nbc, rank, Link, PairwiseMatrix, RewardTable, SamplingDistribution, UserPopulation,
};

/// Half-width for values printed with two decimals.
pub const PRINTED_TOL: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub expected: String,
    pub computed: String,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &str, expected: impl Into<String>, computed: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            expected: expected.into(),
            computed: computed.into(),
            pass,
        }
    }
}

fn table(rows: &[Vec<f64>]) -> Result<RewardTable<f64>> {
    RewardTable::single_prompt(rows)
}

fn nbc_under(rows: &[Vec<f64>], weights: &[f64], link: &Link<f64>, dist: &[f64]) -> Result<Vec<f64>> {
    let r = table(rows)?;
    let pop = UserPopulation::new((0..weights.len()).map(|u| format!("u{u}")).collect(), weights.to_vec())?;
    nbc(&r, &pop, link, &SamplingDistribution::repeated(dist, 1)?, 0)
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn within(v: f64, target: f64) -> bool {
    (v - target).abs() <= PRINTED_TOL
}

fn sensitivity_rows() -> Vec<Vec<f64>> {
    vec![vec![6.0, 3.0], vec![1.0, 9.0], vec![4.0, 4.0]]
}

pub fn tyranny() -> Result<CheckResult> {
    let s = nbc_under(&[vec![0.5, 0.5], vec![1.0, -10.0]], &[0.9, 0.1], &Link::logistic(), &uniform(2))?;
    Ok(CheckResult::new(
        "tyranny_nbc",
        "(0.47, 0.53) ± 0.005",
        format!("({:.5}, {:.5})", s[0], s[1]),
        within(s[0], 0.47) && within(s[1], 0.53),
    ))
}

pub fn irrelevant_alternative() -> Result<CheckResult> {
    let link = Link::logistic();
    let rows = sensitivity_rows();
    let two = nbc_under(&rows[..2], &[0.5, 0.5], &link, &uniform(2))?;
    let three = nbc_under(&[rows[0].clone(), rows[1].clone(), vec![2.0, 2.0]], &[0.5, 0.5], &link, &uniform(3))?;
    Ok(CheckResult::new(
        "irrelevant_alternative",
        "2 options: y2 > y1; 3 options: (0.62, 0.55) ± 0.005",
        format!(
            "2 options: ({:.5}, {:.5}); 3 options: ({:.5}, {:.5}, {:.5})",
            two[0], two[1], three[0], three[1], three[2]
        ),
        two[1] > two[0] && within(three[0], 0.62) && within(three[1], 0.55),
    ))
}

pub fn sampling_sensitivity() -> Result<CheckResult> {
    let link = Link::logistic();
    let gap = |d: f64| -> Result<f64> {
        let s = nbc_under(&sensitivity_rows(), &[0.5, 0.5], &link, &[(1.0 - d) / 2.0, (1.0 - d) / 2.0, d])?;
        Ok(s[0] - s[1])
    };
    let (low, high) = (gap(0.02)?, gap(0.04)?);
    Ok(CheckResult::new(
        "sampling_sensitivity",
        "NBC(y1) − NBC(y2) < 0 at D(y3)=0.02, > 0 at 0.04",
        format!("{low:+.6} at 0.02, {high:+.6} at 0.04"),
        low < 0.0 && high > 0.0,
    ))
}

pub fn temperature_flip() -> Result<CheckResult> {
    let gap = |t: f64| -> Result<f64> {
        let s = nbc_under(&sensitivity_rows(), &[0.5, 0.5], &Link::with_temperature(t)?, &uniform(3))?;
        Ok(s[0] - s[1])
    };
    let (t1, t2) = (gap(1.0)?, gap(2.0)?);
    Ok(CheckResult::new(
        "temperature_flip",
        "NBC(y1) − NBC(y2) > 0 at temperature 1, < 0 at temperature 2",
        format!("{t1:+.6} at 1, {t2:+.6} at 2"),
        t1 > 0.0 && t2 < 0.0,
    ))
}

pub fn mediocrity() -> Result<CheckResult> {
    // short, med, long
    let rows = vec![vec![0.0, 4.0, 0.0], vec![1.0, 1.0, 1.0], vec![4.0, 0.0, 0.0]];
    let w = uniform(3);
    let s = nbc_under(&rows, &w, &Link::logistic(), &uniform(3))?;
    let avg: Vec<f64> = rows.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
    let tol = 1e-12;
    let nbc_rank = rank(&s, tol);
    let avg_rank = rank(&avg, tol);
    Ok(CheckResult::new(
        "mediocrity",
        "NBC ranks med first; average reward ties short and long first",
        format!(
            "NBC ({:.5}, {:.5}, {:.5}); average reward ({:.4}, {:.4}, {:.4})",
            s[0], s[1], s[2], avg[0], avg[1], avg[2]
        ),
        nbc_rank.top() == Some(&[1][..]) && avg_rank.top() == Some(&[0, 2][..]),
    ))
}

pub fn mixture_cycle() -> Result<CheckResult> {
    let rewards = Array2::from_shape_vec((3, 2), vec![1.0f64, 1.0, 2.0, 2.0, 3.0, 4.0]).expect("3x2");
    let p = PairwiseMatrix::from_rewards(&rewards, &[0.5, 0.5], &Link::logistic())?;
    let (f, b) = cycle_products(&p, 0, 1, 2)?;
    Ok(CheckResult::new(
        "mixture_cycle",
        "|forward − reverse| > 1e-3 (≈ 0.04785 vs ≈ 0.04909)",
        format!("{f:.7} vs {b:.7}"),
        (f - b).abs() > 1e-3,
    ))
}

/// Every check, in a fixed order.
pub fn verify_examples() -> Result<Vec<CheckResult>> {
    Ok(vec![
        tyranny()?,
        irrelevant_alternative()?,
        sampling_sensitivity()?,
        temperature_flip()?,
        mediocrity()?,
        mixture_cycle()?,
    ])
}
