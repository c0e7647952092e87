//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use neural_mpc::harness::{ExperimentConfig, Setup};
use neural_mpc::{Mat, Vector};

pub fn cartpole() -> (ExperimentConfig, Setup) {
    let cfg = ExperimentConfig::default();
    let setup = cfg.setup().expect("default setup");
    (cfg, setup)
}

/// Truncated exponential series without scaling.
pub fn taylor_exp(a: &Mat, terms: usize) -> Mat {
    let n = a.nrows();
    let mut sum = Mat::identity(n, n);
    let mut term = Mat::identity(n, n);
    for k in 1..terms {
        term = &term * a / k as f64;
        sum += &term;
    }
    sum
}

/// ZOH pair from the augmented series.
pub fn zoh_series(a_c: &Mat, b_c: &Mat, ts: f64, terms: usize) -> (Mat, Mat) {
    let (n, p) = (a_c.nrows(), b_c.ncols());
    let mut aug = Mat::zeros(n + p, n + p);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_c * ts));
    aug.view_mut((0, n), (n, p)).copy_from(&(b_c * ts));
    let e = taylor_exp(&aug, terms);
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, p)).into_owned())
}

/// Backward Riccati recursion from `P = q` for `steps` steps; returns
/// `(P, K)` with `K = (r + b'Pb)^-1 b'Pa`.
pub fn riccati_recursion(a: &Mat, b: &Mat, q: &Mat, r: &Mat, steps: usize) -> (Mat, Mat) {
    let mut p = q.clone();
    for _ in 0..steps {
        let s = r + b.transpose() * &p * b;
        let k = s.clone().try_inverse().unwrap() * b.transpose() * &p * a;
        p = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        p = (&p + p.transpose()) * 0.5;
    }
    let s = r + b.transpose() * &p * b;
    let k = s.try_inverse().unwrap() * b.transpose() * &p * a;
    (p, k)
}

/// Explicit state rollout `x_{k+1} = a x_k + b u_k`, stacked `x_1..x_N`.
pub fn rollout(a: &Mat, b: &Mat, x0: &Vector, u: &Vector) -> Vector {
    let (n, p) = (a.nrows(), b.ncols());
    let horizon = u.len() / p;
    let mut out = Vector::zeros(n * horizon);
    let mut x = x0.clone();
    for k in 0..horizon {
        x = a * &x + b * u.rows(k * p, p);
        out.rows_mut(k * n, n).copy_from(&x);
    }
    out
}

/// Count of off-diagonal entries with `|w| > thr`.
pub fn brute_force_edges(w: &Mat, thr: f64) -> usize {
    let mut count = 0;
    for i in 0..w.nrows() {
        for j in 0..w.ncols() {
            if i != j && w[(i, j)].abs() > thr {
                count += 1;
            }
        }
    }
    count
}

pub fn relu(v: &Vector) -> Vector {
    v.map(|x| x.max(0.0))
}

pub fn sym_max_eig(w: &Mat) -> f64 {
    let s = (w + w.transpose()) * 0.5;
    s.symmetric_eigenvalues().max()
}
