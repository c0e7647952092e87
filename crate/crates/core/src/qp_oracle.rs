//! Brute-force reference solvers for the condensed QP.
//!
//! The enumeration solver is exhaustive and slow by construction; it exists
//! so that every network-based answer can be checked against something that
//! shares no code path with the dynamics.

use crate::condenser::CondensedQp;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

/// Largest constraint count the enumeration solver accepts.
pub const MAX_ENUMERATION_ROWS: usize = 24;

const FEAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub u: Vector,
    pub lambda: Vector,
    /// Rows carrying a strictly positive multiplier in the returned dual.
    pub active: Vec<usize>,
    pub objective: f64,
}

/// Calls `visit` with every subset of `0..n` of size at most `max_size`, in
/// increasing size and then lexicographic order.
fn for_each_subset(n: usize, max_size: usize, mut visit: impl FnMut(&[usize])) {
    let mut subset = Vec::with_capacity(max_size);
    for size in 0..=max_size.min(n) {
        subset.clear();
        subset.extend(0..size);
        loop {
            visit(&subset);
            // advance to the next combination
            let mut i = size;
            while i > 0 && subset[i - 1] == n - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            subset[i - 1] += 1;
            for j in i..size {
                subset[j] = subset[j - 1] + 1;
            }
        }
    }
}

fn select_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Solves the equality-constrained KKT system for working set `active`.
/// Returns `None` when the active rows are linearly dependent.
fn kkt_candidate(qp: &CondensedQp, x0: &Vector, rhs: &Vector, active: &[usize]) -> Option<(Vector, Vector)> {
    let sx = &qp.s * x0;
    let u_free = -qp.h_solve_vec(&sx);
    if active.is_empty() {
        return Some((u_free, Vector::zeros(0)));
    }
    let ga = select_rows(&qp.g_mat, active);
    let hinv_gat = qp.h_solve(&ga.transpose());
    let schur = linalg::symmetric_part(&(&ga * &hinv_gat));
    let ev = linalg::sym_eigenvalues(&schur);
    let (lo, hi) = (ev[0], *ev.last().unwrap());
    if !(hi > 0.0) || lo <= 1e-12 * hi {
        return None;
    }
    // G_A u = rhs_A with u = u_free - H^-1 G_A' lambda_A
    let target = &ga * &u_free - select_vec(rhs, active);
    let lambda = schur.cholesky()?.solve(&target);
    let u = u_free - hinv_gat * &lambda;
    Some((u, lambda))
}

fn select_vec(v: &Vector, rows: &[usize]) -> Vector {
    Vector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

/// Minimal-Euclidean-norm `lambda >= 0` with `G' lambda = r`, supported on `tight`.
fn least_norm_dual(qp: &CondensedQp, tight: &[usize], r: &Vector) -> Option<Vector> {
    if tight.len() > 16 {
        return None;
    }
    let scale = r.norm().max(1.0);
    let mut best: Option<(f64, Vec<usize>, Vector)> = None;
    for_each_subset(tight.len(), tight.len(), |pick| {
        let support: Vec<usize> = pick.iter().map(|&i| tight[i]).collect();
        let candidate = if support.is_empty() {
            Vector::zeros(0)
        } else {
            let gt = select_rows(&qp.g_mat, &support).transpose();
            let svd = gt.svd(true, true);
            match svd.solve(r, 1e-12) {
                Ok(v) => v,
                Err(_) => return,
            }
        };
        let fits = if support.is_empty() {
            r.norm() <= 1e-8 * scale
        } else {
            (select_rows(&qp.g_mat, &support).transpose() * &candidate - r).norm() <= 1e-8 * scale
        };
        if !fits || candidate.iter().any(|v| *v < -1e-10) {
            return;
        }
        let norm = candidate.norm();
        if best.as_ref().is_none_or(|(b, _, _)| norm < *b - 1e-14) {
            best = Some((norm, support, candidate));
        }
    });
    best.map(|(_, support, values)| {
        let mut lambda = Vector::zeros(qp.m);
        for (k, &row) in support.iter().enumerate() {
            lambda[row] = values[k].max(0.0);
        }
        lambda
    })
}

/// Exhaustive active-set solver.
///
/// Every working set of linearly independent rows is tried; the feasible,
/// dual-feasible candidate with the lowest objective wins. Among all optimal
/// multiplier vectors the one of least Euclidean norm is returned.
pub fn solve_active_set_enumeration(qp: &CondensedQp, x0: &Vector) -> Result<OracleSolution> {
    if qp.m > MAX_ENUMERATION_ROWS {
        return Err(Error::TooLarge(format!(
            "{} constraint rows exceed the enumeration limit of {MAX_ENUMERATION_ROWS}",
            qp.m
        )));
    }
    if x0.len() != qp.n_states() {
        return Err(Error::Dimension(format!(
            "x0 has {} entries, expected {}",
            x0.len(),
            qp.n_states()
        )));
    }
    let rhs = qp.rhs(x0);
    let scale = rhs.iter().map(|v| v.abs()).fold(1.0, f64::max);
    // working sets larger than the number of variables are always dependent
    let max_size = qp.n_vars().min(qp.m);
    let mut best: Option<(f64, Vector)> = None;
    for_each_subset(qp.m, max_size, |active| {
        let Some((u, lambda)) = kkt_candidate(qp, x0, &rhs, active) else {
            return;
        };
        if lambda.iter().any(|l| *l < -FEAS_TOL * scale) {
            return;
        }
        let slack = &qp.g_mat * &u - &rhs;
        if slack.iter().any(|s| *s > FEAS_TOL * scale) {
            return;
        }
        let obj = qp.objective(&u, x0);
        if best.as_ref().is_none_or(|(b, _)| obj < *b - 1e-12 * b.abs().max(1.0)) {
            best = Some((obj, u));
        }
    });
    let (objective, u) = best.ok_or_else(|| Error::Infeasible("no feasible KKT point among working sets".into()))?;

    let slack = &qp.g_mat * &u - &rhs;
    let tight: Vec<usize> = (0..qp.m).filter(|&i| slack[i].abs() <= 1e-8 * scale).collect();
    let r = -(&qp.h * &u + &qp.s * x0);
    let lambda = least_norm_dual(qp, &tight, &r)
        .ok_or_else(|| Error::Numerical("could not recover multipliers for the optimal input".into()))?;
    let active = (0..qp.m).filter(|&i| lambda[i] > 0.0).collect();
    Ok(OracleSolution {
        u,
        lambda,
        active,
        objective,
    })
}

/// Dual objective `1/2 l' G H^-1 G' l + (G H^-1 S x0 + g + T x0)' l`.
pub fn dual_objective(qp: &CondensedQp, lambda: &Vector, x0: &Vector) -> f64 {
    let (w, c) = dual_data(qp, x0);
    0.5 * lambda.dot(&(&w * lambda)) + c.dot(lambda)
}

/// Hessian and linear term of the dual objective.
pub fn dual_data(qp: &CondensedQp, x0: &Vector) -> (Mat, Vector) {
    let hinv_gt = qp.h_solve(&qp.g_mat.transpose());
    let w = linalg::symmetric_part(&(&qp.g_mat * &hinv_gt));
    let c = &qp.g_mat * qp.h_solve_vec(&(&qp.s * x0)) + qp.rhs(x0);
    (w, c)
}

/// Largest eigenvalue of `G H^-1 G'`, the Lipschitz constant of the dual gradient.
pub fn dual_lipschitz(qp: &CondensedQp) -> f64 {
    let (w, _) = dual_data(qp, &Vector::zeros(qp.n_states()));
    linalg::max_sym_eigenvalue(&w).max(0.0)
}

/// Discrete projected gradient on the dual, started from `lambda = 0`.
pub fn solve_projected_gradient(qp: &CondensedQp, x0: &Vector, iters: usize, step: f64) -> Result<Vector> {
    solve_projected_gradient_from(qp, x0, &Vector::zeros(qp.m), iters, step)
}

pub fn solve_projected_gradient_from(
    qp: &CondensedQp,
    x0: &Vector,
    lambda0: &Vector,
    iters: usize,
    step: f64,
) -> Result<Vector> {
    let (w, c) = dual_data(qp, x0);
    let lip = linalg::max_sym_eigenvalue(&w).max(0.0);
    if !(step > 0.0) || step * lip > 1.0 + 1e-12 {
        return Err(Error::Parameter(format!(
            "step {step} must lie in (0, 1/L] with L = {lip}"
        )));
    }
    if lambda0.len() != qp.m {
        return Err(Error::Dimension("initial multiplier length mismatch".into()));
    }
    let mut lambda = lambda0.map(|v| v.max(0.0));
    for _ in 0..iters {
        let grad = &w * &lambda + &c;
        lambda = (&lambda - grad * step).map(|v| v.max(0.0));
    }
    Ok(lambda)
}

/// KKT residuals of a primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct KktResiduals {
    /// `max(G u - g - T x0, 0)` in the infinity norm.
    pub primal_infeasibility: f64,
    /// Most negative multiplier (0 when all are nonnegative).
    pub min_multiplier: f64,
    /// `|lambda' (G u - g - T x0)|`
    pub complementarity: f64,
    /// `||H u + S x0 + G' lambda||_inf`
    pub stationarity: f64,
}

pub fn kkt_residuals(qp: &CondensedQp, u: &Vector, lambda: &Vector, x0: &Vector) -> KktResiduals {
    let slack = qp.constraint_slack(u, x0);
    let stat = &qp.h * u + &qp.s * x0 + qp.g_mat.transpose() * lambda;
    KktResiduals {
        primal_infeasibility: slack.iter().fold(0.0, |a, s| a.max(*s)),
        min_multiplier: lambda.iter().fold(0.0, |a, l| a.min(*l)),
        complementarity: lambda.dot(&slack).abs(),
        stationarity: linalg::inf_norm(&stat),
    }
}
