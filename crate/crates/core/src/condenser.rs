//! Condensation of the finite-horizon MPC problem into a dense QP over the
//! stacked inputs, plus the dual-network data derived from it.
//!
//! Constraint rows are laid out as follows (this ordering is a contract the
//! slack augmentation and the analytics labels depend on):
//!
//! 1. input rows, step-major: for `k = 0..N`, for each input `j`, the upper
//!    bound row `u_k[j] <= ub[j]` followed by the lower bound row
//!    `-u_k[j] <= -lb[j]`;
//! 2. state rows, step-major: for `k = 1..=N`, for each constrained output
//!    `c_i x_k`, the upper row followed by the lower row.

use std::fmt;

use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, all_finite, Mat, Vector};
use crate::plant::DiscretePlant;

#[derive(Debug, Clone, PartialEq)]
pub struct StateConstraints {
    pub c: Mat,
    pub lower: Vector,
    pub upper: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputConstraints {
    pub lower: Vector,
    pub upper: Vector,
}

/// Finite-horizon constrained linear-quadratic control problem.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub plant: DiscretePlant,
    pub horizon: usize,
    pub q: Mat,
    pub r: Mat,
    pub p_term: Mat,
    pub state_con: Option<StateConstraints>,
    pub input_con: Option<InputConstraints>,
}

fn check_psd(m: &Mat, what: &str, strict: bool) -> Result<()> {
    if !all_finite(m) {
        return Err(Error::InvalidModel(format!("{what} has non-finite entries")));
    }
    let asym = (m - m.transpose()).norm();
    if asym > 1e-9 * m.norm().max(1.0) {
        return Err(Error::InvalidModel(format!("{what} is not symmetric")));
    }
    let min_ev = linalg::sym_eigenvalues(m).first().copied().unwrap_or(0.0);
    let tol = 1e-10 * m.norm().max(1.0);
    if strict && min_ev <= 0.0 {
        return Err(Error::InvalidModel(format!(
            "{what} must be positive definite (min eigenvalue {min_ev})"
        )));
    }
    if !strict && min_ev < -tol {
        return Err(Error::InvalidModel(format!(
            "{what} must be positive semidefinite (min eigenvalue {min_ev})"
        )));
    }
    Ok(())
}

fn check_bounds(lower: &Vector, upper: &Vector, what: &str) -> Result<()> {
    if lower.len() != upper.len() {
        return Err(Error::Dimension(format!("{what} bound lengths differ")));
    }
    for (lo, hi) in lower.iter().zip(upper.iter()) {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::InvalidModel(format!(
                "{what} bounds must satisfy lower < upper, got {lo} / {hi}"
            )));
        }
    }
    Ok(())
}

impl MpcProblem {
    pub fn validate(&self) -> Result<()> {
        let (n, p) = (self.plant.n_states(), self.plant.n_inputs());
        if self.horizon == 0 {
            return Err(Error::InvalidModel("horizon must be at least 1".into()));
        }
        if self.plant.b.nrows() != n
            || self.q.shape() != (n, n)
            || self.p_term.shape() != (n, n)
            || self.r.shape() != (p, p)
        {
            return Err(Error::Dimension(format!(
                "weights q {:?}, r {:?}, p {:?} do not match plant with n = {n}, p = {p}",
                self.q.shape(),
                self.r.shape(),
                self.p_term.shape()
            )));
        }
        check_psd(&self.q, "q", false)?;
        check_psd(&self.p_term, "terminal weight", false)?;
        check_psd(&self.r, "r", true)?;
        if let Some(sc) = &self.state_con {
            if sc.c.ncols() != n || sc.c.nrows() != sc.lower.len() {
                return Err(Error::Dimension(format!(
                    "state constraint matrix {:?} inconsistent with n = {n} and {} bounds",
                    sc.c.shape(),
                    sc.lower.len()
                )));
            }
            check_bounds(&sc.lower, &sc.upper, "state")?;
        }
        if let Some(ic) = &self.input_con {
            if ic.lower.len() != p {
                return Err(Error::Dimension(format!(
                    "input bounds have {} entries, plant has {p} inputs",
                    ic.lower.len()
                )));
            }
            check_bounds(&ic.lower, &ic.upper, "input")?;
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.plant.n_states()
    }

    pub fn n_inputs(&self) -> usize {
        self.plant.n_inputs()
    }

    /// Cost of the rollout from `x0` under the stacked inputs `u`, evaluated
    /// stage by stage (no condensation involved).
    pub fn rollout_cost(&self, x0: &Vector, u: &Vector) -> f64 {
        let p = self.n_inputs();
        let mut x = x0.clone();
        let mut cost = 0.0;
        for k in 0..self.horizon {
            let uk = u.rows(k * p, p).into_owned();
            cost += 0.5 * (x.dot(&(&self.q * &x)) + uk.dot(&(&self.r * &uk)));
            x = self.plant.step(&x, &uk);
        }
        cost + 0.5 * x.dot(&(&self.p_term * &x))
    }
}

/// Stacked prediction `x = s_x x0 + s_u u` over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub s_x: Mat,
    pub s_u: Mat,
}

pub fn build_prediction_matrices(problem: &MpcProblem) -> PredictionMatrices {
    let (n, p, horizon) = (problem.n_states(), problem.n_inputs(), problem.horizon);
    let a = &problem.plant.a;
    let b = &problem.plant.b;
    // powers[k] = A^k
    let mut powers = vec![Mat::identity(n, n)];
    for k in 1..=horizon {
        let next = a * &powers[k - 1];
        powers.push(next);
    }
    let mut s_x = Mat::zeros(horizon * n, n);
    let mut s_u = Mat::zeros(horizon * n, horizon * p);
    for i in 0..horizon {
        s_x.view_mut((i * n, 0), (n, n)).copy_from(&powers[i + 1]);
        for j in 0..=i {
            s_u.view_mut((i * n, j * p), (n, p)).copy_from(&(&powers[i - j] * b));
        }
    }
    PredictionMatrices { s_x, s_u }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSide {
    Upper,
    Lower,
}

/// What a constraint row (equivalently, a neuron) stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowKind {
    Input { step: usize, index: usize, side: BoundSide },
    State { step: usize, index: usize, side: BoundSide },
    Slack { index: usize },
}

impl RowKind {
    pub fn is_state(&self) -> bool {
        matches!(self, RowKind::State { .. })
    }
}

impl fmt::Display for RowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = |s: &BoundSide| if *s == BoundSide::Upper { '+' } else { '-' };
        match self {
            RowKind::Input { step, index, side } => write!(f, "u{step}[{index}]{}", sign(side)),
            RowKind::State { step, index, side } => write!(f, "y{step}[{index}]{}", sign(side)),
            RowKind::Slack { index } => write!(f, "s[{index}]"),
        }
    }
}

/// Dense QP `min 1/2 u'Hu + x0'S'u  s.t.  G u <= g + T x0`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub h: Mat,
    pub s: Mat,
    pub g_mat: Mat,
    pub t_mat: Mat,
    pub g_vec: Vector,
    pub m: usize,
    /// Number of inputs per step; the first-action selector picks these rows.
    pub upsilon_rows: usize,
    pub rows: Vec<RowKind>,
    pub prediction: PredictionMatrices,
    h_chol: Cholesky<f64, Dyn>,
}

impl CondensedQp {
    pub fn n_vars(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.s.ncols()
    }

    /// `H^-1 rhs` via the cached Cholesky factor.
    pub fn h_solve(&self, rhs: &Mat) -> Mat {
        self.h_chol.solve(rhs)
    }

    pub fn h_solve_vec(&self, rhs: &Vector) -> Vector {
        self.h_chol.solve(rhs)
    }

    /// Right-hand side `g + T x0`.
    pub fn rhs(&self, x0: &Vector) -> Vector {
        &self.g_vec + &self.t_mat * x0
    }

    pub fn objective(&self, u: &Vector, x0: &Vector) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + (&self.s * x0).dot(u)
    }

    /// `G u - g - T x0`; feasible iff every entry is `<= 0`.
    pub fn constraint_slack(&self, u: &Vector, x0: &Vector) -> Vector {
        &self.g_mat * u - self.rhs(x0)
    }

    /// Indices of the state-constraint rows.
    pub fn state_rows(&self) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_state())
            .map(|(i, _)| i)
            .collect()
    }

    /// Copy of the problem whose bound vector is multiplied by `factor`.
    pub fn with_scaled_bounds(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.g_vec *= factor;
        out
    }

    /// Copy keeping only the constraint rows `keep`, in that order; indices
    /// may repeat to duplicate rows.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.m) {
            return Err(Error::Dimension(format!(
                "row {bad} out of range for {} constraints",
                self.m
            )));
        }
        let mut out = self.clone();
        out.g_mat = Mat::from_fn(keep.len(), self.n_vars(), |i, j| self.g_mat[(keep[i], j)]);
        out.t_mat = Mat::from_fn(keep.len(), self.n_states(), |i, j| self.t_mat[(keep[i], j)]);
        out.g_vec = Vector::from_iterator(keep.len(), keep.iter().map(|&i| self.g_vec[i]));
        out.rows = keep.iter().map(|&i| self.rows[i]).collect();
        out.m = keep.len();
        Ok(out)
    }

    /// Primal input sequence recovered from multipliers by stationarity.
    pub fn primal_from_dual(&self, lambda: &Vector, x0: &Vector) -> Vector {
        -self.h_solve_vec(&(self.g_mat.transpose() * lambda + &self.s * x0))
    }
}

/// Builds `H`, `S`, `G`, `T`, `g` from an MPC problem.
pub fn condense(problem: &MpcProblem) -> Result<CondensedQp> {
    problem.validate()?;
    let (n, p, horizon) = (problem.n_states(), problem.n_inputs(), problem.horizon);
    let pred = build_prediction_matrices(problem);

    let mut q_blocks: Vec<&Mat> = vec![&problem.q; horizon - 1];
    q_blocks.push(&problem.p_term);
    let q_bar = linalg::block_diag(&q_blocks);
    let r_bar = linalg::block_diag(&vec![&problem.r; horizon]);

    let h = linalg::symmetric_part(&(pred.s_u.transpose() * &q_bar * &pred.s_u + r_bar));
    let s = pred.s_u.transpose() * &q_bar * &pred.s_x;
    let h_chol = linalg::cholesky(&h, "condensed Hessian H")?;

    let mut g_rows: Vec<Vector> = Vec::new();
    let mut t_rows: Vec<Vector> = Vec::new();
    let mut g_vec: Vec<f64> = Vec::new();
    let mut rows = Vec::new();

    if let Some(ic) = &problem.input_con {
        for k in 0..horizon {
            for j in 0..p {
                for side in [BoundSide::Upper, BoundSide::Lower] {
                    let mut row = Vector::zeros(horizon * p);
                    let (sign, bound) = match side {
                        BoundSide::Upper => (1.0, ic.upper[j]),
                        BoundSide::Lower => (-1.0, -ic.lower[j]),
                    };
                    row[k * p + j] = sign;
                    g_rows.push(row);
                    t_rows.push(Vector::zeros(n));
                    g_vec.push(bound);
                    rows.push(RowKind::Input {
                        step: k,
                        index: j,
                        side,
                    });
                }
            }
        }
    }
    if let Some(sc) = &problem.state_con {
        for k in 1..=horizon {
            let su_block = pred.s_u.rows((k - 1) * n, n);
            let sx_block = pred.s_x.rows((k - 1) * n, n);
            for i in 0..sc.c.nrows() {
                let c_i = sc.c.row(i);
                let gu = (c_i * su_block).transpose();
                let gx = (c_i * sx_block).transpose();
                for side in [BoundSide::Upper, BoundSide::Lower] {
                    let (sign, bound) = match side {
                        BoundSide::Upper => (1.0, sc.upper[i]),
                        BoundSide::Lower => (-1.0, -sc.lower[i]),
                    };
                    g_rows.push(&gu * sign);
                    t_rows.push(&gx * -sign);
                    g_vec.push(bound);
                    rows.push(RowKind::State {
                        step: k,
                        index: i,
                        side,
                    });
                }
            }
        }
    }

    let m = rows.len();
    let g_mat = Mat::from_fn(m, horizon * p, |i, j| g_rows[i][j]);
    let t_mat = Mat::from_fn(m, n, |i, j| t_rows[i][j]);
    Ok(CondensedQp {
        h,
        s,
        g_mat,
        t_mat,
        g_vec: Vector::from_vec(g_vec),
        m,
        upsilon_rows: p,
        rows,
        prediction: pred,
        h_chol,
    })
}

/// Synaptic weights, input map, bias and read-out maps of the dual network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkData {
    /// `I - G H^-1 G'`
    pub gamma: Mat,
    /// `G H^-1 S + T`
    pub m_map: Mat,
    pub bias: Vector,
    /// First-action rows of `H^-1 S`.
    pub u_feedback: Mat,
    /// First-action rows of `H^-1 G'`.
    pub u_dual_map: Mat,
    pub labels: Vec<RowKind>,
}

impl NetworkData {
    pub fn size(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.u_feedback.nrows()
    }

    /// External drive `M x0 + g` entering every neuron.
    pub fn drive(&self, x0: &Vector) -> Vector {
        &self.m_map * x0 + &self.bias
    }

    /// `u = -u_dual_map lambda - u_feedback x0`.
    pub fn control(&self, lambda: &Vector, x0: &Vector) -> Vector {
        -(&self.u_dual_map * lambda) - &self.u_feedback * x0
    }

    /// Control with every neuron silent: the unconstrained feedback law.
    pub fn unconstrained_control(&self, x0: &Vector) -> Vector {
        -(&self.u_feedback * x0)
    }

    /// Stacked read-out `[Gamma; -u_dual_map]` that multilayer networks factor.
    pub fn stacked_theta(&self) -> Mat {
        let (m, p) = (self.size(), self.n_inputs());
        let mut theta = Mat::zeros(m + p, m);
        theta.view_mut((0, 0), (m, m)).copy_from(&self.gamma);
        theta.view_mut((m, 0), (p, m)).copy_from(&(-&self.u_dual_map));
        theta
    }
}

pub fn build_network(qp: &CondensedQp) -> Result<NetworkData> {
    let p = qp.upsilon_rows;
    let hinv_gt = qp.h_solve(&qp.g_mat.transpose());
    let hinv_s = qp.h_solve(&qp.s);
    if !all_finite(&hinv_gt) || !all_finite(&hinv_s) {
        return Err(Error::Numerical("H solve produced non-finite values".into()));
    }
    let w = linalg::symmetric_part(&(&qp.g_mat * &hinv_gt));
    let gamma = Mat::identity(qp.m, qp.m) - w;
    let m_map = &qp.g_mat * &hinv_s + &qp.t_mat;
    Ok(NetworkData {
        gamma,
        m_map,
        bias: qp.g_vec.clone(),
        u_feedback: hinv_s.rows(0, p).into_owned(),
        u_dual_map: hinv_gt.rows(0, p).into_owned(),
        labels: qp.rows.clone(),
    })
}

/// Bookkeeping for a slack-augmented network.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlackMeta {
    pub m: usize,
    pub m_s: usize,
    pub rho: f64,
    pub state_rows: Vec<usize>,
}

/// Network for the QP whose state rows are softened by nonnegative slacks
/// with quadratic penalty weight `rho`.
///
/// The synaptic matrix is
/// `[[Gamma - EE'/rho, -E/rho], [-E'/rho, (1 - 1/rho) I]]`
/// where `E` selects the state rows.
pub fn augment_slack(qp: &CondensedQp, rho: f64) -> Result<(NetworkData, SlackMeta)> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Parameter(format!("slack penalty must be positive, got {rho}")));
    }
    let base = build_network(qp)?;
    let state_rows = qp.state_rows();
    let (m, m_s) = (qp.m, state_rows.len());
    let mut e = Mat::zeros(m, m_s);
    for (col, &row) in state_rows.iter().enumerate() {
        e[(row, col)] = 1.0;
    }
    let inv = 1.0 / rho;
    let total = m + m_s;
    let mut gamma = Mat::zeros(total, total);
    gamma
        .view_mut((0, 0), (m, m))
        .copy_from(&(&base.gamma - &e * e.transpose() * inv));
    gamma.view_mut((0, m), (m, m_s)).copy_from(&(&e * -inv));
    gamma.view_mut((m, 0), (m_s, m)).copy_from(&(e.transpose() * -inv));
    gamma
        .view_mut((m, m), (m_s, m_s))
        .copy_from(&(Mat::identity(m_s, m_s) * (1.0 - inv)));

    let n = qp.n_states();
    let p = qp.upsilon_rows;
    let mut m_map = Mat::zeros(total, n);
    m_map.view_mut((0, 0), (m, n)).copy_from(&base.m_map);
    let mut bias = Vector::zeros(total);
    bias.rows_mut(0, m).copy_from(&base.bias);
    let mut u_dual_map = Mat::zeros(p, total);
    u_dual_map.view_mut((0, 0), (p, m)).copy_from(&base.u_dual_map);
    let mut labels = base.labels.clone();
    labels.extend((0..m_s).map(|index| RowKind::Slack { index }));

    Ok((
        NetworkData {
            gamma,
            m_map,
            bias,
            u_feedback: base.u_feedback,
            u_dual_map,
            labels,
        },
        SlackMeta {
            m,
            m_s,
            rho,
            state_rows,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(v: f64) -> Mat {
        Mat::from_element(1, 1, v)
    }

    fn integrator_problem(horizon: usize) -> MpcProblem {
        MpcProblem {
            plant: DiscretePlant {
                a: scalar(1.0),
                b: scalar(1.0),
                ts: 1.0,
            },
            horizon,
            q: scalar(1.0),
            r: scalar(1.0),
            p_term: scalar(1.0),
            state_con: Some(StateConstraints {
                c: scalar(1.0),
                lower: Vector::from_element(1, -1.0),
                upper: Vector::from_element(1, 1.0),
            }),
            input_con: Some(InputConstraints {
                lower: Vector::from_element(1, -0.5),
                upper: Vector::from_element(1, 0.5),
            }),
        }
    }

    #[test]
    fn single_step_prediction() {
        let pred = build_prediction_matrices(&integrator_problem(1));
        assert_eq!(pred.s_x, scalar(1.0));
        assert_eq!(pred.s_u, scalar(1.0));
    }

    #[test]
    fn two_step_integrator_prediction() {
        let pred = build_prediction_matrices(&integrator_problem(2));
        assert_eq!(pred.s_x, Mat::from_column_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(pred.s_u, Mat::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
    }

    #[test]
    fn row_ordering_contract() {
        let qp = condense(&integrator_problem(2)).unwrap();
        assert_eq!(qp.m, 8);
        let up = |step| RowKind::Input {
            step,
            index: 0,
            side: BoundSide::Upper,
        };
        assert_eq!(qp.rows[0], up(0));
        assert_eq!(qp.rows[2], up(1));
        assert_eq!(
            qp.rows[4],
            RowKind::State {
                step: 1,
                index: 0,
                side: BoundSide::Upper
            }
        );
        assert_eq!(
            qp.rows[7],
            RowKind::State {
                step: 2,
                index: 0,
                side: BoundSide::Lower
            }
        );
        assert_eq!(qp.state_rows(), vec![4, 5, 6, 7]);
        // x2 >= -1  ->  -(x0 + u0 + u1) <= 1
        assert_eq!(qp.g_mat.row(7).iter().copied().collect::<Vec<_>>(), vec![-1.0, -1.0]);
        assert_eq!(qp.t_mat[(7, 0)], 1.0);
        assert_eq!(qp.g_vec[7], 1.0);
        assert_eq!(qp.g_vec[1], 0.5);
        assert_eq!(format!("{}", qp.rows[1]), "u0[0]-");
    }

    #[test]
    fn zero_state_weights_decouple_cost() {
        let mut prob = integrator_problem(3);
        prob.q = scalar(0.0);
        prob.p_term = scalar(0.0);
        let qp = condense(&prob).unwrap();
        assert_relative_eq!(qp.h, Mat::identity(3, 3), epsilon = 1e-15);
        assert_relative_eq!(qp.s, Mat::zeros(3, 1), epsilon = 1e-15);
    }

    #[test]
    fn unconstrained_network_is_identity() {
        let mut prob = integrator_problem(2);
        prob.state_con = None;
        prob.input_con = None;
        let qp = condense(&prob).unwrap();
        assert_eq!(qp.m, 0);
        let net = build_network(&qp).unwrap();
        assert_eq!(net.gamma.shape(), (0, 0));
        assert_eq!(net.m_map.shape(), (0, 1));
    }

    #[test]
    fn invalid_problems_are_rejected() {
        let mut prob = integrator_problem(2);
        prob.r = scalar(0.0);
        assert!(matches!(condense(&prob), Err(Error::InvalidModel(_))));
        let mut prob = integrator_problem(2);
        prob.horizon = 0;
        assert!(condense(&prob).is_err());
        let mut prob = integrator_problem(2);
        prob.input_con.as_mut().unwrap().lower[0] = 1.0;
        assert!(condense(&prob).is_err());
        let mut prob = integrator_problem(2);
        prob.q = Mat::identity(2, 2);
        assert!(matches!(condense(&prob), Err(Error::Dimension(_))));
    }

    #[test]
    fn slack_rejects_nonpositive_rho() {
        let qp = condense(&integrator_problem(2)).unwrap();
        assert!(matches!(augment_slack(&qp, 0.0), Err(Error::Parameter(_))));
        assert!(augment_slack(&qp, -1.0).is_err());
    }

    #[test]
    fn slack_block_template() {
        let qp = condense(&integrator_problem(2)).unwrap();
        let base = build_network(&qp).unwrap();
        let rho = 4.0;
        let (aug, meta) = augment_slack(&qp, rho).unwrap();
        assert_eq!((meta.m, meta.m_s), (8, 4));
        assert_eq!(aug.gamma.shape(), (12, 12));
        for i in 0..8 {
            for j in 0..8 {
                let shift = if i == j && i >= 4 { 0.25 } else { 0.0 };
                assert_eq!(aug.gamma[(i, j)], base.gamma[(i, j)] - shift);
            }
        }
        assert_eq!(aug.gamma[(4, 8)], -0.25);
        assert_eq!(aug.gamma[(8, 4)], -0.25);
        assert_eq!(aug.gamma[(0, 8)], 0.0);
        assert_eq!(aug.gamma[(9, 9)], 0.75);
        assert_eq!(aug.gamma[(9, 10)], 0.0);
        assert_eq!(aug.labels[8], RowKind::Slack { index: 0 });
        assert!(aug.bias.rows(8, 4).iter().all(|v| *v == 0.0));
    }
}
