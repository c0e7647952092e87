//! Firing-rate dynamics that solve the dual QP, and their multilayer
//! realizations.
//!
//! All networks are integrated with explicit Euler in the dimensionless time
//! `s = t / eta`; a step of physical length `dt` advances `s` by `dt / eta`.
//! The regularization schedule `eps(s) = eps0 / (1 + s)` is evaluated in that
//! dimensionless time, measured from the start of each settle call.

use std::sync::Arc;

use crate::condenser::NetworkData;
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, vec_finite, Mat, Vector};

/// Elementwise rectification `max(v, 0)`.
pub fn relu(v: &Vector) -> Vector {
    v.map(|x| x.max(0.0))
}

/// Vanishing Tikhonov weight `eps0 / (1 + s)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpsilonSchedule {
    pub eps0: f64,
}

impl EpsilonSchedule {
    pub fn new(eps0: f64) -> Result<Self> {
        if !(eps0.is_finite() && eps0 >= 0.0) {
            return Err(Error::Parameter(format!("eps0 must be nonnegative, got {eps0}")));
        }
        Ok(Self { eps0 })
    }

    pub fn value(&self, s: f64) -> f64 {
        self.eps0 / (1.0 + s)
    }
}

/// Integration settings shared by every network flavour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub eta: f64,
    pub dt: f64,
}

impl Timing {
    /// `eta` with the default step `eta / 20`.
    pub fn new(eta: f64) -> Result<Self> {
        Self::with_dt(eta, eta / 20.0)
    }

    pub fn with_dt(eta: f64, dt: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::Config(format!("network timescale must be positive, got {eta}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("network step must be positive, got {dt}")));
        }
        if dt / eta > 0.5 {
            return Err(Error::Config(format!(
                "network step {dt} exceeds half the timescale {eta}; explicit Euler would be unreliable"
            )));
        }
        Ok(Self { eta, dt })
    }

    pub fn ratio(&self) -> f64 {
        self.dt / self.eta
    }
}

/// Result of integrating a network towards equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct SettleOutcome {
    pub state: Vector,
    pub settled: bool,
    /// Physical network time spent.
    pub elapsed: f64,
    pub steps: usize,
    /// Final `||d state / ds||_inf`.
    pub residual: f64,
}

/// Common interface of the rate networks: a state vector, a drift field and a
/// read-out. Integration and settling are provided on top of those.
pub trait NeuralDynamics {
    fn state(&self) -> &Vector;
    fn state_mut(&mut self) -> &mut Vector;
    fn timing(&self) -> Timing;

    /// `d state / ds` at dimensionless time `s` for measurement `x0`.
    fn drift(&self, x0: &Vector, s: f64) -> Vector;

    /// First control action read out from the current state.
    fn control(&self, x0: &Vector) -> Vector;

    /// One explicit Euler step of physical length `dt`; `s` is the elapsed
    /// dimensionless time at the start of the step.
    fn step(&mut self, x0: &Vector, s: f64) -> Result<()> {
        let h = self.timing().ratio();
        let d = self.drift(x0, s);
        let state = self.state_mut();
        state.axpy(h, &d, 1.0);
        if !vec_finite(state) {
            return Err(Error::Divergence("network state became non-finite".into()));
        }
        Ok(())
    }

    /// Integrates until `||drift||_inf <= tol` or `max_time` of physical
    /// network time has elapsed. Not settling is reported, not an error.
    fn settle(&mut self, x0: &Vector, tol: f64, max_time: f64) -> Result<SettleOutcome> {
        settle_impl(self, x0, tol, max_time, None)
    }

    /// Like [`NeuralDynamics::settle`] but also returns the state at every grid
    /// point, starting with the initial state.
    fn settle_recorded(&mut self, x0: &Vector, tol: f64, max_time: f64) -> Result<(SettleOutcome, Vec<Vector>)> {
        let mut traj = Vec::new();
        let out = settle_impl(self, x0, tol, max_time, Some(&mut traj))?;
        Ok((out, traj))
    }
}

fn settle_impl<D: NeuralDynamics + ?Sized>(
    net: &mut D,
    x0: &Vector,
    tol: f64,
    max_time: f64,
    mut record: Option<&mut Vec<Vector>>,
) -> Result<SettleOutcome> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!(
            "settle tolerance must be positive, got {tol}"
        )));
    }
    let timing = net.timing();
    let h = timing.ratio();
    let max_steps = (max_time / timing.dt).round().max(0.0) as usize;
    let mut s = 0.0;
    let mut steps = 0;
    if let Some(r) = record.as_deref_mut() {
        r.push(net.state().clone());
    }
    loop {
        let d = net.drift(x0, s);
        let residual = inf_norm(&d);
        if residual <= tol || steps >= max_steps {
            return Ok(SettleOutcome {
                state: net.state().clone(),
                settled: residual <= tol,
                elapsed: steps as f64 * timing.dt,
                steps,
                residual,
            });
        }
        let state = net.state_mut();
        state.axpy(h, &d, 1.0);
        if !vec_finite(state) {
            return Err(Error::Divergence("network state became non-finite".into()));
        }
        steps += 1;
        s += h;
        if let Some(r) = record.as_deref_mut() {
            r.push(net.state().clone());
        }
    }
}

/// Single-layer network `eta lambda' = -lambda + relu((Gamma - eps I) lambda - M x0 - g)`.
#[derive(Debug, Clone)]
pub struct FiringRateNetwork {
    pub data: Arc<NetworkData>,
    pub timing: Timing,
    pub epsilon: EpsilonSchedule,
    pub lambda: Vector,
}

impl FiringRateNetwork {
    pub fn new(data: Arc<NetworkData>, timing: Timing) -> Self {
        let m = data.size();
        Self {
            data,
            timing,
            epsilon: EpsilonSchedule::default(),
            lambda: Vector::zeros(m),
        }
    }

    pub fn with_epsilon(mut self, epsilon: EpsilonSchedule) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Copy of this network running on the synaptic matrix `gamma + delta`.
    pub fn perturbed(&self, delta: &Mat) -> Result<Self> {
        if delta.shape() != self.data.gamma.shape() {
            return Err(Error::Dimension(format!(
                "perturbation {:?} does not match synaptic matrix {:?}",
                delta.shape(),
                self.data.gamma.shape()
            )));
        }
        let mut data = (*self.data).clone();
        data.gamma += delta;
        Ok(Self {
            data: Arc::new(data),
            ..self.clone()
        })
    }

    pub fn reset(&mut self) {
        self.lambda.fill(0.0);
    }

    /// Forward-Euler update; `s` is the dimensionless time since the start of settling.
    pub fn step_single_layer(&mut self, x0: &Vector, s: f64) -> Result<&Vector> {
        self.step(x0, s)?;
        Ok(&self.lambda)
    }

    /// Control read-out `-u_dual_map lambda - u_feedback x0` for any multiplier vector.
    pub fn extract_control(&self, lambda: &Vector, x0: &Vector) -> Vector {
        self.data.control(lambda, x0)
    }
}

impl NeuralDynamics for FiringRateNetwork {
    fn state(&self) -> &Vector {
        &self.lambda
    }

    fn state_mut(&mut self) -> &mut Vector {
        &mut self.lambda
    }

    fn timing(&self) -> Timing {
        self.timing
    }

    fn drift(&self, x0: &Vector, s: f64) -> Vector {
        let eps = self.epsilon.value(s);
        let mut arg = &self.data.gamma * &self.lambda - self.data.drive(x0);
        if eps != 0.0 {
            arg.axpy(-eps, &self.lambda, 1.0);
        }
        relu(&arg) - &self.lambda
    }

    fn control(&self, x0: &Vector) -> Vector {
        self.data.control(&self.lambda, x0)
    }
}

/// Inputs a multilayer network shares with the single-layer network it realizes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilayerInputs {
    pub m_map: Mat,
    pub bias: Vector,
    pub u_feedback: Mat,
}

impl From<&NetworkData> for MultilayerInputs {
    fn from(data: &NetworkData) -> Self {
        Self {
            m_map: data.m_map.clone(),
            bias: data.bias.clone(),
            u_feedback: data.u_feedback.clone(),
        }
    }
}

/// Two-layer network `eta z' = -z + Psi relu(Omega1 z - M x0 - g)` with
/// read-out `u = Omega2 z - u_feedback x0`. The state `z` may be negative.
#[derive(Debug, Clone)]
pub struct MultilayerNetwork {
    pub omega1: Mat,
    pub omega2: Mat,
    pub psi: Mat,
    pub inputs: Arc<MultilayerInputs>,
    pub timing: Timing,
    pub tilde_lambda: Vector,
}

impl MultilayerNetwork {
    pub fn new(omega1: Mat, omega2: Mat, psi: Mat, inputs: Arc<MultilayerInputs>, timing: Timing) -> Result<Self> {
        let m = inputs.bias.len();
        let k = psi.nrows();
        if omega1.shape() != (m, k)
            || psi.ncols() != m
            || omega2.ncols() != k
            || omega2.nrows() != inputs.u_feedback.nrows()
        {
            return Err(Error::Dimension(format!(
                "factor shapes omega1 {:?}, omega2 {:?}, psi {:?} inconsistent with {m} neurons",
                omega1.shape(),
                omega2.shape(),
                psi.shape()
            )));
        }
        Ok(Self {
            omega1,
            omega2,
            psi,
            inputs,
            timing,
            tilde_lambda: Vector::zeros(k),
        })
    }

    pub fn reset(&mut self) {
        self.tilde_lambda.fill(0.0);
    }

    pub fn step_multilayer(&mut self, x0: &Vector) -> Result<&Vector> {
        self.step(x0, 0.0)?;
        Ok(&self.tilde_lambda)
    }

    /// Outputs `(y, u0_tilde) = (Omega1 z, Omega2 z)` of the linear block.
    pub fn outputs(&self) -> (Vector, Vector) {
        (&self.omega1 * &self.tilde_lambda, &self.omega2 * &self.tilde_lambda)
    }
}

impl NeuralDynamics for MultilayerNetwork {
    fn state(&self) -> &Vector {
        &self.tilde_lambda
    }

    fn state_mut(&mut self) -> &mut Vector {
        &mut self.tilde_lambda
    }

    fn timing(&self) -> Timing {
        self.timing
    }

    fn drift(&self, x0: &Vector, _s: f64) -> Vector {
        let arg = &self.omega1 * &self.tilde_lambda - &self.inputs.m_map * x0 - &self.inputs.bias;
        &self.psi * relu(&arg) - &self.tilde_lambda
    }

    fn control(&self, x0: &Vector) -> Vector {
        &self.omega2 * &self.tilde_lambda - &self.inputs.u_feedback * x0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condenser::RowKind;
    use approx::assert_relative_eq;

    fn one_neuron(gamma: f64, drive_bias: f64) -> Arc<NetworkData> {
        Arc::new(NetworkData {
            gamma: Mat::from_element(1, 1, gamma),
            m_map: Mat::zeros(1, 1),
            bias: Vector::from_element(1, drive_bias),
            u_feedback: Mat::zeros(1, 1),
            u_dual_map: Mat::from_element(1, 1, 1.0),
            labels: vec![RowKind::Slack { index: 0 }],
        })
    }

    #[test]
    fn relu_examples() {
        let v = Vector::from_column_slice(&[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&v), Vector::from_column_slice(&[0.0, 0.0, 2.0]));
        assert_eq!(relu(&Vector::from_element(4, -3.0)), Vector::zeros(4));
    }

    #[test]
    fn step_size_guard() {
        assert!(matches!(Timing::with_dt(1e-3, 1e-3), Err(Error::Config(_))));
        assert!(Timing::with_dt(1e-3, 5e-4).is_ok());
        assert!(Timing::new(0.0).is_err());
        assert_relative_eq!(Timing::new(1e-3).unwrap().dt, 5e-5);
    }

    #[test]
    fn inactive_constraint_keeps_rate_at_zero() {
        let mut net = FiringRateNetwork::new(one_neuron(0.5, 1.0), Timing::new(1.0).unwrap());
        for _ in 0..50 {
            net.step_single_layer(&Vector::zeros(1), 0.0).unwrap();
        }
        assert_eq!(net.lambda[0], 0.0);
    }

    #[test]
    fn scalar_fixed_point() {
        // Gamma = 0 and drive -1: lambda* = relu(1) = 1
        let mut net = FiringRateNetwork::new(one_neuron(0.0, -1.0), Timing::new(1.0).unwrap());
        let out = net.settle(&Vector::zeros(1), 1e-12, 1e4).unwrap();
        assert!(out.settled);
        assert_relative_eq!(out.state[0], 1.0, epsilon = 1e-11);
    }

    #[test]
    fn unsettled_run_is_flagged() {
        let mut net = FiringRateNetwork::new(one_neuron(0.0, -1.0), Timing::new(1.0).unwrap());
        let out = net.settle(&Vector::zeros(1), 1e-12, 0.5).unwrap();
        assert!(!out.settled);
        assert_eq!(out.steps, 10);
        assert!(net.settle(&Vector::zeros(1), 0.0, 1.0).is_err());
    }

    #[test]
    fn recorded_trajectory_has_initial_point() {
        let mut net = FiringRateNetwork::new(one_neuron(0.0, -1.0), Timing::new(1.0).unwrap());
        let (out, traj) = net.settle_recorded(&Vector::zeros(1), 1e-6, 100.0).unwrap();
        assert_eq!(traj.len(), out.steps + 1);
        assert_eq!(traj[0][0], 0.0);
        assert_eq!(traj.last().unwrap(), &out.state);
    }

    #[test]
    fn epsilon_schedule_decays() {
        let e = EpsilonSchedule::new(0.1).unwrap();
        assert_eq!(e.value(0.0), 0.1);
        assert_relative_eq!(e.value(9.0), 0.01);
        assert!(EpsilonSchedule::new(-1.0).is_err());
    }

    #[test]
    fn multilayer_shape_check() {
        let data = one_neuron(0.0, -1.0);
        let inputs = Arc::new(MultilayerInputs::from(&*data));
        let t = Timing::new(1.0).unwrap();
        assert!(
            MultilayerNetwork::new(Mat::zeros(1, 2), Mat::zeros(1, 2), Mat::zeros(2, 1), inputs.clone(), t).is_ok()
        );
        assert!(MultilayerNetwork::new(Mat::zeros(2, 2), Mat::zeros(1, 2), Mat::zeros(2, 1), inputs, t).is_err());
    }
}
