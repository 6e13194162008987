//! Brute-force reference solvers shared by the integration targets.

#![allow(dead_code)]

/// A hyperplane `a·x = b`.
pub struct Plane {
    pub a: Vec<f64>,
    pub b: f64,
}

/// Solves the square system `A x = b` by Gauss-Jordan elimination with
/// partial pivoting. `None` when the system is (numerically) singular.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Minimum of `objective` over every point where `n` linearly independent
/// planes are tight, all of `required` are among them, and `feasible` holds.
///
/// For a piecewise-linear convex objective whose breakpoints are included in
/// `planes`, this is the exact minimum over the feasible polytope.
pub fn vertex_min(
    n: usize,
    planes: &[Plane],
    required: &[usize],
    feasible: impl Fn(&[f64]) -> bool,
    objective: impl Fn(&[f64]) -> f64,
) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut pick = Vec::with_capacity(n);
    fn rec(
        n: usize,
        start: usize,
        pick: &mut Vec<usize>,
        total: usize,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if pick.len() == n {
            visit(pick);
            return;
        }
        for i in start..total {
            pick.push(i);
            rec(n, i + 1, pick, total, visit);
            pick.pop();
        }
    }
    rec(n, 0, &mut pick, planes.len(), &mut |idx: &[usize]| {
        if !required.iter().all(|r| idx.contains(r)) {
            return;
        }
        let a = idx.iter().map(|&i| planes[i].a.clone()).collect();
        let b = idx.iter().map(|&i| planes[i].b).collect();
        if let Some(x) = solve(a, b) {
            if feasible(&x) {
                let v = objective(&x);
                best = Some(best.map_or(v, |m: f64| m.min(v)));
            }
        }
    });
    best
}

fn unit(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = 1.0;
    e
}

/// Minimum TV distance from uniform over distributions `q` with `q ≥ eps`
/// and `Σ_k q_k (P[j][k] − P[i][k]) ≥ delta`, by vertex enumeration.
pub fn flip_oracle(p: &[Vec<f64>], i: usize, j: usize, eps: f64, delta: f64) -> Option<f64> {
    let n = p.len();
    let u = 1.0 / n as f64;
    let margin: Vec<f64> = (0..n).map(|k| p[j][k] - p[i][k]).collect();
    let mut planes = vec![Plane { a: vec![1.0; n], b: 1.0 }];
    for k in 0..n {
        planes.push(Plane { a: unit(n, k), b: eps });
        planes.push(Plane { a: unit(n, k), b: u });
    }
    planes.push(Plane { a: margin.clone(), b: delta });
    let tol = 1e-12;
    vertex_min(
        n,
        &planes,
        &[0],
        |q| {
            q.iter().all(|&v| v >= eps - tol)
                && q.iter().zip(&margin).map(|(a, b)| a * b).sum::<f64>() >= delta - tol
        },
        |q| 0.5 * q.iter().map(|v| (v - u).abs()).sum::<f64>(),
    )
}
