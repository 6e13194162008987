//! Dense two-phase primal simplex with Bland's rule.
//!
//! Problems are `min cᵀx` subject to rows `aᵢᵀx {≤,≥,=} bᵢ` and per-variable
//! lower bounds `x ≥ l`. Sizes of a few dozen variables are the target, so the
//! tableau is a plain row-major `Vec<Vec<F>>`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Real;

const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint<F> {
    pub coeffs: Vec<F>,
    pub sense: Sense,
    pub rhs: F,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem<F> {
    pub objective: Vec<F>,
    pub constraints: Vec<Constraint<F>>,
    pub lower: Vec<F>,
}

impl<F: Real> LpProblem<F> {
    /// Minimization of `objective` with every variable bounded below by zero.
    pub fn new(objective: Vec<F>) -> Self {
        let lower = vec![F::zero(); objective.len()];
        Self {
            objective,
            constraints: Vec::new(),
            lower,
        }
    }

    pub fn with_lower(mut self, lower: Vec<F>) -> Self {
        self.lower = lower;
        self
    }

    pub fn add(&mut self, coeffs: Vec<F>, sense: Sense, rhs: F) -> &mut Self {
        self.constraints.push(Constraint { coeffs, sense, rhs });
        self
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        if self.lower.len() != n {
            return Err(Error::Shape(format!("{} lower bounds for {n} variables", self.lower.len())));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.coeffs.len() != n {
                return Err(Error::Shape(format!("row {i} has {} coefficients, expected {n}", c.coeffs.len())));
            }
        }
        let finite = self
            .objective
            .iter()
            .chain(&self.lower)
            .chain(self.constraints.iter().flat_map(|c| c.coeffs.iter().chain(std::iter::once(&c.rhs))))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("LP data must be finite".into()));
        }
        Ok(())
    }

    /// Largest violation of any row or bound at `x` (zero when feasible).
    pub fn max_violation(&self, x: &[F]) -> F {
        let mut worst = F::zero();
        for (v, l) in x.iter().zip(&self.lower) {
            worst = worst.max(*l - *v);
        }
        for c in &self.constraints {
            let lhs: F = c.coeffs.iter().zip(x).map(|(a, v)| *a * *v).sum();
            let gap = match c.sense {
                Sense::Le => lhs - c.rhs,
                Sense::Ge => c.rhs - lhs,
                Sense::Eq => (lhs - c.rhs).abs(),
            };
            worst = worst.max(gap);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution<F> {
    pub status: LpStatus,
    /// Primal point; empty unless `status` is optimal.
    pub x: Vec<F>,
    pub objective: F,
}

impl<F: Real> LpSolution<F> {
    fn without_point(status: LpStatus) -> Self {
        let objective = match status {
            LpStatus::Unbounded => F::neg_infinity(),
            _ => F::infinity(),
        };
        Self {
            status,
            x: Vec::new(),
            objective,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

struct Tableau<F> {
    rows: Vec<Vec<F>>,
    basis: Vec<usize>,
    /// Reduced costs, with the negated objective value in the last slot.
    cost: Vec<F>,
    width: usize,
    tol: F,
}

enum Outcome {
    Optimal,
    Unbounded,
}

impl<F: Real> Tableau<F> {
    fn rhs(&self, i: usize) -> F {
        self.rows[i][self.width]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        for v in self.rows[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[r].clone();
        let eliminate = |row: &mut Vec<F>| {
            let f = row[c];
            if f != F::zero() {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * *pv;
                }
                row[c] = F::zero();
            }
        };
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i != r {
                eliminate(row);
            }
        }
        eliminate(&mut self.cost);
        self.basis[r] = c;
    }

    fn set_cost(&mut self, c: &[F]) {
        let mut cost = c.to_vec();
        cost.push(F::zero());
        for (i, row) in self.rows.iter().enumerate() {
            let cb = c[self.basis[i]];
            if cb != F::zero() {
                for (v, a) in cost.iter_mut().zip(row) {
                    *v -= cb * *a;
                }
            }
        }
        self.cost = cost;
    }

    /// Bland's rule: lowest-index improving column, ratio ties to the lowest
    /// basic index.
    fn run(&mut self, allowed: &[bool]) -> Result<Outcome> {
        for _ in 0..MAX_PIVOTS {
            let Some(c) = (0..self.width).find(|&j| allowed[j] && self.cost[j] < -self.tol) else {
                return Ok(Outcome::Optimal);
            };
            let mut leave: Option<(usize, F)> = None;
            for i in 0..self.rows.len() {
                let a = self.rows[i][c];
                if a > self.tol {
                    let ratio = self.rhs(i) / a;
                    let better = match leave {
                        None => true,
                        Some((k, best)) => {
                            ratio < best - self.tol || (ratio <= best + self.tol && self.basis[i] < self.basis[k])
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, c),
                None => return Ok(Outcome::Unbounded),
            }
        }
        Err(Error::Domain(format!("simplex exceeded {MAX_PIVOTS} pivots")))
    }
}

pub fn simplex_solve<F: Real>(p: &LpProblem<F>) -> Result<LpSolution<F>> {
    p.validate()?;
    let n = p.n_vars();
    let tol = F::solver_tol();

    // shift to x' = x − l ≥ 0 and make every right-hand side nonnegative
    let mut rows: Vec<(Vec<F>, Sense, F)> = p
        .constraints
        .iter()
        .map(|c| {
            let shift: F = c.coeffs.iter().zip(&p.lower).map(|(a, l)| *a * *l).sum();
            let b = c.rhs - shift;
            if b < F::zero() {
                let flipped = match c.sense {
                    Sense::Le => Sense::Ge,
                    Sense::Ge => Sense::Le,
                    Sense::Eq => Sense::Eq,
                };
                (c.coeffs.iter().map(|a| -*a).collect(), flipped, -b)
            } else {
                (c.coeffs.clone(), c.sense, b)
            }
        })
        .collect();
    let m = rows.len();
    let n_slack = rows.iter().filter(|r| r.1 != Sense::Eq).count();
    let n_art = rows.iter().filter(|r| r.1 != Sense::Le).count();
    let width = n + n_slack + n_art;
    let art_start = n + n_slack;

    let mut table = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let (mut next_slack, mut next_art) = (n, art_start);
    for (coeffs, sense, b) in rows.drain(..) {
        let mut row = coeffs;
        row.resize(width + 1, F::zero());
        row[width] = b;
        match sense {
            Sense::Le => {
                row[next_slack] = F::one();
                basis.push(next_slack);
                next_slack += 1;
            }
            Sense::Ge => {
                row[next_slack] = -F::one();
                next_slack += 1;
                row[next_art] = F::one();
                basis.push(next_art);
                next_art += 1;
            }
            Sense::Eq => {
                row[next_art] = F::one();
                basis.push(next_art);
                next_art += 1;
            }
        }
        table.push(row);
    }
    let mut t = Tableau {
        rows: table,
        basis,
        cost: Vec::new(),
        width,
        tol,
    };

    if n_art > 0 {
        let phase1: Vec<F> = (0..width).map(|j| if j >= art_start { F::one() } else { F::zero() }).collect();
        t.set_cost(&phase1);
        t.run(&vec![true; width])?;
        let scale = t.rows.iter().map(|r| r[width].abs()).fold(F::one(), F::max);
        if -t.cost[width] > tol * F::lit(100.0) * scale {
            return Ok(LpSolution::without_point(LpStatus::Infeasible));
        }
        // pivot out artificials left in the basis at zero; drop redundant rows
        let mut i = 0;
        while i < t.rows.len() {
            if t.basis[i] >= art_start {
                match (0..art_start).find(|&j| t.rows[i][j].abs() > tol) {
                    Some(j) => t.pivot(i, j),
                    None => {
                        t.rows.remove(i);
                        t.basis.remove(i);
                        continue;
                    }
                }
            }
            i += 1;
        }
    }

    let mut c2 = p.objective.clone();
    c2.resize(width, F::zero());
    t.set_cost(&c2);
    let allowed: Vec<bool> = (0..width).map(|j| j < art_start).collect();
    if let Outcome::Unbounded = t.run(&allowed)? {
        return Ok(LpSolution::without_point(LpStatus::Unbounded));
    }

    let mut x = p.lower.clone();
    for (i, &b) in t.basis.iter().enumerate() {
        if b < n {
            x[b] += t.rhs(i);
        }
    }
    let objective = p.objective.iter().zip(&x).map(|(c, v)| *c * *v).sum();
    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        objective,
    })
}
