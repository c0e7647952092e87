//! Plant models: continuous-time linear pairs, exact zero-order-hold
//! discretization, the discrete Riccati terminal cost, and propagation of the
//! plant between controller samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, all_finite, vec_finite, Mat, Vector};

/// Physical parameters of the pendulum-on-a-cart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pend_mass: f64,
    pub length: f64,
    pub gravity: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pend_mass: 0.4,
            length: 1.0,
            gravity: 9.81,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pend_mass, self.length, self.gravity];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::InvalidModel(format!(
                "cart-pole parameters must be finite and strictly positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Linearization about the upright equilibrium, state `(y, y', theta, theta')`.
    pub fn linearized(&self) -> (Mat, Mat) {
        let Self {
            cart_mass: big_m,
            pend_mass: m,
            length: l,
            gravity: g,
        } = *self;
        #[rustfmt::skip]
        let a = Mat::from_row_slice(4, 4, &[
            0.0, 1.0, 0.0, 0.0,
            0.0, 0.0, -m * g / big_m, 0.0,
            0.0, 0.0, 0.0, 1.0,
            0.0, 0.0, (big_m + m) * g / (big_m * l), 0.0,
        ]);
        let b = Mat::from_column_slice(4, 1, &[0.0, 1.0 / big_m, 0.0, -1.0 / (big_m * l)]);
        (a, b)
    }

    /// Time derivative of the full nonlinear model.
    pub fn derivative(&self, x: &Vector, u: f64) -> Result<Vector> {
        if x.len() != 4 {
            return Err(Error::Dimension(format!(
                "cart-pole state has 4 entries, got {}",
                x.len()
            )));
        }
        let Self {
            cart_mass: big_m,
            pend_mass: m,
            length: l,
            gravity: g,
        } = *self;
        let (theta, omega) = (x[2], x[3]);
        let (s, c) = theta.sin_cos();
        // [(M+m)  m l cos][y'' ]   [u + m l w^2 sin]
        // [ cos     l    ][th''] = [    g sin      ]
        let det = (big_m + m) * l - m * l * c * c;
        if det.abs() <= 1e-12 * (big_m + m) * l {
            return Err(Error::Integration(format!(
                "singular cart-pole mass matrix at theta = {theta}"
            )));
        }
        let r1 = u + m * l * omega * omega * s;
        let r2 = g * s;
        let y_acc = (l * r1 - m * l * c * r2) / det;
        let th_acc = ((big_m + m) * r2 - c * r1) / det;
        Ok(Vector::from_column_slice(&[x[1], y_acc, omega, th_acc]))
    }
}

/// Continuous-time linear plant `x' = a_c x + b_c u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a_c: Mat,
    pub b_c: Mat,
    pub cart_pole: Option<CartPoleParams>,
}

impl PlantModel {
    pub fn new(a_c: Mat, b_c: Mat) -> Result<Self> {
        if !a_c.is_square() {
            return Err(Error::Dimension(format!("a_c must be square, got {:?}", a_c.shape())));
        }
        if a_c.nrows() != b_c.nrows() {
            return Err(Error::Dimension(format!(
                "a_c has {} rows but b_c has {}",
                a_c.nrows(),
                b_c.nrows()
            )));
        }
        if !all_finite(&a_c) || !all_finite(&b_c) {
            return Err(Error::InvalidModel("non-finite entries in plant matrices".into()));
        }
        Ok(Self {
            a_c,
            b_c,
            cart_pole: None,
        })
    }

    pub fn cart_pole(params: CartPoleParams) -> Result<Self> {
        params.validate()?;
        let (a_c, b_c) = params.linearized();
        Ok(Self {
            a_c,
            b_c,
            cart_pole: Some(params),
        })
    }

    pub fn n_states(&self) -> usize {
        self.a_c.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b_c.ncols()
    }
}

/// Sampled-data plant `x+ = a x + b u` with sample period `ts`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePlant {
    pub a: Mat,
    pub b: Mat,
    pub ts: f64,
}

impl DiscretePlant {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &Vector, u: &Vector) -> Vector {
        &self.a * x + &self.b * u
    }
}

/// Exact zero-order-hold discretization through the exponential of the
/// augmented block matrix `[[a_c, b_c], [0, 0]] * ts`.
pub fn discretize_zoh(model: &PlantModel, ts: f64) -> Result<DiscretePlant> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::Parameter(format!("sample period must be positive, got {ts}")));
    }
    if !all_finite(&model.a_c) || !all_finite(&model.b_c) {
        return Err(Error::InvalidModel("non-finite entries in plant matrices".into()));
    }
    let (n, p) = (model.n_states(), model.n_inputs());
    let mut aug = Mat::zeros(n + p, n + p);
    aug.view_mut((0, 0), (n, n)).copy_from(&model.a_c);
    aug.view_mut((0, n), (n, p)).copy_from(&model.b_c);
    let e = linalg::expm(&(aug * ts))?;
    Ok(DiscretePlant {
        a: e.view((0, 0), (n, n)).into_owned(),
        b: e.view((0, n), (n, p)).into_owned(),
        ts,
    })
}

const DARE_REL_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;

fn riccati_map(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let gain = linalg::cholesky(&s, "r + b'Pb")?.solve(&(pb.transpose() * a));
    let next = q + a.transpose() * p * a - a.transpose() * &pb * gain;
    Ok(linalg::symmetric_part(&next))
}

/// Frobenius norm of the Riccati residual `q + a'Pa - a'Pb(r + b'Pb)^-1 b'Pa - P`.
pub fn dare_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<f64> {
    Ok((riccati_map(a, b, q, r, p)? - p).norm())
}

fn check_dare_inputs(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension(format!(
            "inconsistent DARE shapes a {:?}, b {:?}, q {:?}, r {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    if ![a, b, q, r].iter().all(|m| all_finite(m)) {
        return Err(Error::InvalidModel("non-finite entries in DARE data".into()));
    }
    Ok(())
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
///
/// Runs the Riccati value iteration from `P = q` until the relative change
/// drops below 1e-12, then polishes with a few Newton (Hewer) steps, each of
/// which solves a discrete Lyapunov equation for the current closed loop.
pub fn solve_dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<Mat> {
    check_dare_inputs(a, b, q, r)?;
    let mut p = linalg::symmetric_part(q);
    let mut converged = false;
    for _ in 0..DARE_MAX_ITER {
        let next = riccati_map(a, b, q, r, &p)?;
        if !all_finite(&next) {
            return Err(Error::NoSolution("Riccati iteration produced non-finite values".into()));
        }
        let change = (&next - &p).norm();
        let scale = next.norm().max(f64::MIN_POSITIVE);
        p = next;
        if change <= DARE_REL_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoSolution(format!(
            "Riccati iteration did not converge in {DARE_MAX_ITER} iterations"
        )));
    }

    let stabilizing = |p: &Mat| -> Result<bool> {
        let k = lqr_gain(a, b, q, r, p)?;
        Ok(linalg::spectral_radius(&(a - b * k)) < 1.0)
    };
    if !stabilizing(&p)? {
        return Err(Error::NoSolution(
            "Riccati iteration did not reach a stabilizing solution".into(),
        ));
    }
    let mut best = dare_residual(a, b, q, r, &p)?;
    for _ in 0..5 {
        let k = lqr_gain(a, b, q, r, &p)?;
        let closed = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let Ok(candidate) = linalg::solve_discrete_lyapunov(&closed, &c) else {
            break;
        };
        let res = dare_residual(a, b, q, r, &candidate)?;
        if !(res < best) || !stabilizing(&candidate)? {
            break;
        }
        best = res;
        p = candidate;
    }
    Ok(p)
}

/// Infinite-horizon LQR gain `K = (r + b'Pb)^-1 b'Pa`.
pub fn lqr_gain(a: &Mat, b: &Mat, _q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    Ok(linalg::cholesky(&s, "r + b'Pb")?.solve(&(pb.transpose() * a)))
}

/// Fixed-step classical Runge-Kutta integration of `x' = f(x)`.
pub fn rk4<F>(mut f: F, x: &Vector, dt: f64, substeps: usize) -> Result<Vector>
where
    F: FnMut(&Vector) -> Result<Vector>,
{
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Parameter(format!(
            "integration interval must be positive, got {dt}"
        )));
    }
    if substeps == 0 {
        return Err(Error::Parameter("at least one substep is required".into()));
    }
    let h = dt / substeps as f64;
    let mut x = x.clone();
    for _ in 0..substeps {
        let k1 = f(&x)?;
        let k2 = f(&(&x + &k1 * (h / 2.0)))?;
        let k3 = f(&(&x + &k2 * (h / 2.0)))?;
        let k4 = f(&(&x + &k3 * h))?;
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    if !vec_finite(&x) {
        return Err(Error::Integration("state became non-finite".into()));
    }
    Ok(x)
}

/// Advances the linear plant over `dt` with `u` held constant.
pub fn propagate_linear(model: &PlantModel, x: &Vector, u: &Vector, dt: f64, substeps: usize) -> Result<Vector> {
    if x.len() != model.n_states() || u.len() != model.n_inputs() {
        return Err(Error::Dimension(format!(
            "state/input lengths {}/{} do not match plant {}/{}",
            x.len(),
            u.len(),
            model.n_states(),
            model.n_inputs()
        )));
    }
    if !vec_finite(x) || !vec_finite(u) {
        return Err(Error::InvalidModel("non-finite state or input".into()));
    }
    let forcing = &model.b_c * u;
    rk4(|s| Ok(&model.a_c * s + &forcing), x, dt, substeps)
}

/// Advances the nonlinear cart-pole over `dt` with force `u` held constant.
pub fn propagate_nonlinear_cartpole(
    params: &CartPoleParams,
    x: &Vector,
    u: f64,
    dt: f64,
    substeps: usize,
) -> Result<Vector> {
    params.validate()?;
    if !vec_finite(x) || !u.is_finite() {
        return Err(Error::InvalidModel("non-finite state or input".into()));
    }
    rk4(|s| params.derivative(s, u), x, dt, substeps)
}

/// Which continuous model drives the closed loop between samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantDynamics {
    #[default]
    Linear,
    Nonlinear,
}

/// Propagates `model` according to `dynamics`.
pub fn propagate(
    model: &PlantModel,
    dynamics: PlantDynamics,
    x: &Vector,
    u: &Vector,
    dt: f64,
    substeps: usize,
) -> Result<Vector> {
    match dynamics {
        PlantDynamics::Linear => propagate_linear(model, x, u, dt, substeps),
        PlantDynamics::Nonlinear => {
            let params = model
                .cart_pole
                .as_ref()
                .ok_or_else(|| Error::Config("nonlinear propagation requires cart-pole parameters".into()))?;
            if u.len() != 1 {
                return Err(Error::Dimension("cart-pole takes a single force input".into()));
            }
            propagate_nonlinear_cartpole(params, x, u[0], dt, substeps)
        }
    }
}
