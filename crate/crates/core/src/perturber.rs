//! Perturbed synaptic matrices: pruning, contraction certificates, the
//! trajectory and control deviation bounds they imply, and a sparse redesign
//! heuristic.
//!
//! The contraction metric is the identity throughout. The rate used in the
//! bounds is `mu = max(alpha_sym(W), 0)`, where `alpha_sym` is the largest
//! eigenvalue of the symmetric part of `W`. That rate only covers equal
//! slopes across neurons; the exact identity-metric one-sided Lipschitz
//! constant of `l -> relu(W l + b)` over all slope patterns is available from
//! [`vertex_lipschitz`] and can be larger, so the bounds here are checked
//! empirically rather than certified.

use serde::Serialize;

use crate::condenser::NetworkData;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionCheck {
    pub contracting: bool,
    /// One-sided Lipschitz constant used in the bounds.
    pub mu: f64,
    pub alpha_sym: f64,
}

/// Sufficient contraction test: `alpha_sym(W) < 1`.
pub fn check_contraction(w: &Mat) -> Result<ContractionCheck> {
    if !w.is_square() {
        return Err(Error::Dimension(format!(
            "contraction test needs a square matrix, got {:?}",
            w.shape()
        )));
    }
    if !linalg::all_finite(w) {
        return Err(Error::Numerical("non-finite synaptic weights".into()));
    }
    if w.is_empty() {
        return Ok(ContractionCheck {
            contracting: true,
            mu: 0.0,
            alpha_sym: f64::NEG_INFINITY,
        });
    }
    let alpha_sym = linalg::max_sym_eigenvalue(w);
    Ok(ContractionCheck {
        contracting: alpha_sym < 1.0,
        mu: alpha_sym.max(0.0),
        alpha_sym,
    })
}

/// Largest neuron count accepted by [`vertex_lipschitz`].
pub const MAX_VERTEX_NEURONS: usize = 16;

/// Exact one-sided Lipschitz constant of `l -> relu(W l + b)` in the
/// identity metric, uniform in `b`:
/// `max over D in {0,1}^m of lambda_max(sym(D W))`.
///
/// The slope matrix between two points ranges over diagonal `D` with entries
/// in `[0, 1]`; `lambda_max` is convex and `D W` affine in `D`, so the
/// supremum sits on a vertex.
pub fn vertex_lipschitz(w: &Mat) -> Result<f64> {
    if !w.is_square() {
        return Err(Error::Dimension(
            "one-sided Lipschitz constant needs a square matrix".into(),
        ));
    }
    let m = w.nrows();
    if m > MAX_VERTEX_NEURONS {
        return Err(Error::TooLarge(format!(
            "{m} neurons exceed the vertex enumeration limit of {MAX_VERTEX_NEURONS}"
        )));
    }
    let mut best: f64 = 0.0; // D = 0
    for mask in 1u32..(1u32 << m) {
        let dw = Mat::from_fn(m, m, |i, j| if mask >> i & 1 == 1 { w[(i, j)] } else { 0.0 });
        best = best.max(linalg::max_sym_eigenvalue(&dw));
    }
    Ok(best)
}

/// A change `delta` to a synaptic matrix together with its contraction status.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Mat,
    pub check: ContractionCheck,
    /// Norm budget the perturbation was fitted to, if any.
    pub gamma_tol: Option<f64>,
}

impl Perturbation {
    pub fn mu(&self) -> f64 {
        self.check.mu
    }

    pub fn contracting(&self) -> bool {
        self.check.contracting
    }

    pub fn apply(&self, gamma: &Mat) -> Mat {
        gamma + &self.delta
    }
}

/// Removes off-diagonal weights with `|w| < threshold` and subtracts
/// `diag_shift * I`.
pub fn prune_edges(gamma: &Mat, threshold: f64, diag_shift: f64) -> Result<Perturbation> {
    if !(threshold >= 0.0) {
        return Err(Error::Parameter(format!(
            "prune threshold must be nonnegative, got {threshold}"
        )));
    }
    if !gamma.is_square() {
        return Err(Error::Dimension("synaptic matrix must be square".into()));
    }
    let m = gamma.nrows();
    let delta = Mat::from_fn(m, m, |i, j| {
        if i == j {
            -diag_shift
        } else if gamma[(i, j)].abs() < threshold {
            -gamma[(i, j)]
        } else {
            0.0
        }
    });
    let check = check_contraction(&(gamma + &delta))?;
    Ok(Perturbation {
        delta,
        check,
        gamma_tol: None,
    })
}

/// Worst-case forcing `max_t ||M (x0_1 - x0_2) - delta lambda_1(t)||_2` over a
/// recorded trajectory. With the identity metric the maximum over slopes in
/// `[0, 1]` is attained at unit slopes, leaving the plain vector norm.
pub fn forcing_term(m_map: &Mat, delta: &Mat, x0_1: &Vector, x0_2: &Vector, lambda1_traj: &[Vector]) -> f64 {
    let dx = m_map * (x0_1 - x0_2);
    lambda1_traj
        .iter()
        .map(|l| (&dx - delta * l).norm())
        .fold(dx.norm(), f64::max)
}

/// Upper bound on `||u_1 - u_2||` between the nominal network at `x0_1` and
/// the perturbed one (`gamma + delta`) at `x0_2` once both have settled:
///
/// `||F (x0_1 - x0_2)|| + ||D|| / (1 - mu) * forcing`
///
/// with `F = u_feedback`, `D = u_dual_map` and the forcing taken over the
/// recorded nominal trajectory.
pub fn control_deviation_bound(
    net: &NetworkData,
    delta: &Mat,
    x0_1: &Vector,
    x0_2: &Vector,
    lambda1_traj: &[Vector],
    mu: f64,
) -> Result<f64> {
    if !(mu < 1.0) {
        return Err(Error::Parameter(format!(
            "bound undefined for contraction rate mu = {mu} >= 1"
        )));
    }
    if delta.shape() != net.gamma.shape() {
        return Err(Error::Dimension("perturbation does not match the network".into()));
    }
    let state_term = (&net.u_feedback * (x0_1 - x0_2)).norm();
    let gain = linalg::spectral_norm(&net.u_dual_map) / (1.0 - mu);
    let forcing = forcing_term(&net.m_map, delta, x0_1, x0_2, lambda1_traj);
    Ok(state_term + gain * forcing)
}

/// Largest excess of the measured trajectory gap over the exponential envelope
/// `e^{-(1-mu)s} ||l1(0) - l2(0)|| + (1 - e^{-(1-mu)s}) / (1 - mu) * forcing`
/// on the shared grid `times` (dimensionless). A nonpositive value means the
/// envelope held everywhere.
pub fn dual_deviation_envelope(
    lambda1_traj: &[Vector],
    lambda2_traj: &[Vector],
    times: &[f64],
    mu: f64,
    forcing: f64,
) -> Result<f64> {
    if lambda1_traj.len() != lambda2_traj.len() || lambda1_traj.len() != times.len() {
        return Err(Error::Dimension(format!(
            "trajectory grids differ: {}, {}, {} points",
            lambda1_traj.len(),
            lambda2_traj.len(),
            times.len()
        )));
    }
    if !(mu < 1.0) {
        return Err(Error::Parameter(format!("envelope undefined for mu = {mu} >= 1")));
    }
    let Some((first1, first2)) = lambda1_traj.first().zip(lambda2_traj.first()) else {
        return Ok(f64::NEG_INFINITY);
    };
    let gap0 = (first1 - first2).norm();
    let rate = 1.0 - mu;
    let violation = lambda1_traj
        .iter()
        .zip(lambda2_traj)
        .zip(times)
        .map(|((l1, l2), &t)| {
            let decay = (-rate * t).exp();
            let envelope = decay * gap0 + (1.0 - decay) / rate * forcing;
            (l1 - l2).norm() - envelope
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(violation)
}

/// Record emitted when a bound is checked against a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub bound: f64,
    pub measured: f64,
    pub margin: f64,
}

impl BoundReport {
    pub fn new(bound: f64, measured: f64) -> Self {
        Self {
            bound,
            measured,
            margin: bound - measured,
        }
    }

    pub fn holds(&self) -> bool {
        self.margin >= 0.0
    }
}

/// Sparse symmetric redesign within a norm budget.
///
/// Soft-thresholds the off-diagonal weights at `tau`, symmetrizes, lowers the
/// diagonal until the symmetric part has spectral abscissa below one, and
/// shrinks the resulting change back onto `||delta||_2 <= gamma_tol` when it
/// is too large. For a symmetric `gamma` with `alpha(gamma) <= 1` every
/// shrunken change remains contracting, since the abscissa is convex along
/// the segment.
pub fn redesign_sparse(gamma: &Mat, gamma_tol: f64, tau: f64) -> Result<Perturbation> {
    if !gamma.is_square() {
        return Err(Error::Dimension("synaptic matrix must be square".into()));
    }
    if !(gamma_tol >= 0.0 && tau >= 0.0) {
        return Err(Error::Parameter(format!(
            "budget {gamma_tol} and threshold {tau} must be nonnegative"
        )));
    }
    if (gamma - gamma.transpose()).norm() > 1e-9 * gamma.norm().max(1.0) {
        return Err(Error::Parameter("redesign expects a symmetric synaptic matrix".into()));
    }
    let m = gamma.nrows();
    let zero = || -> Result<Perturbation> {
        Ok(Perturbation {
            delta: Mat::zeros(m, m),
            check: check_contraction(gamma)?,
            gamma_tol: Some(gamma_tol),
        })
    };
    if gamma_tol == 0.0 || m == 0 {
        return zero();
    }
    let shrunk = Mat::from_fn(m, m, |i, j| {
        let w = gamma[(i, j)];
        if i == j {
            w
        } else {
            w.signum() * (w.abs() - tau).max(0.0)
        }
    });
    let mut candidate = linalg::symmetric_part(&shrunk);
    let alpha = linalg::max_sym_eigenvalue(&candidate);
    let shift = (alpha - 1.0 + 1e-6).max(0.0);
    for i in 0..m {
        candidate[(i, i)] -= shift;
    }
    let mut delta = candidate - gamma;
    let size = linalg::spectral_norm(&delta);
    if size > gamma_tol {
        delta *= gamma_tol / size;
    }
    let check = check_contraction(&(gamma + &delta))?;
    if !check.contracting {
        return zero();
    }
    Ok(Perturbation {
        delta,
        check,
        gamma_tol: Some(gamma_tol),
    })
}
