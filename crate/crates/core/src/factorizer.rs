//! Sparsity-constrained factorization `Theta ~ Omega Psi` by proximal
//! alternating linearized minimization (PALM) with hard-threshold proximal
//! maps. Any exact factorization of the stacked read-out
//! `[Gamma; -u_dual_map]` yields a two-layer network with the same control
//! behaviour as the single-layer one.

use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, nnz, Mat};

/// Keeps the `s` entries of largest magnitude and zeroes the rest. Ties are
/// broken in row-major scan order, earliest entry kept.
pub fn hard_threshold(mat: &Mat, s: usize) -> Mat {
    let total = mat.len();
    if s >= total {
        return mat.clone();
    }
    let cols = mat.ncols();
    let mut order: Vec<usize> = (0..total).collect();
    let at = |k: usize| mat[(k / cols, k % cols)];
    // stable sort keeps row-major order among equal magnitudes
    order.sort_by(|&a, &b| at(b).abs().total_cmp(&at(a).abs()));
    let mut out = Mat::zeros(mat.nrows(), cols);
    for &k in &order[..s] {
        out[(k / cols, k % cols)] = at(k);
    }
    out
}

/// `||Theta - Omega Psi||_F`
pub fn factorization_residual(theta: &Mat, omega: &Mat, psi: &Mat) -> f64 {
    (theta - omega * psi).norm()
}

/// Splits the stacked left factor into the recurrent block (top `rows - p`
/// rows) and the read-out block (bottom `p` rows).
pub fn split_factors(omega: &Mat, p: usize) -> Result<(Mat, Mat)> {
    if p > omega.nrows() {
        return Err(Error::Dimension(format!(
            "cannot take {p} read-out rows from a {}-row factor",
            omega.nrows()
        )));
    }
    let m = omega.nrows() - p;
    Ok((omega.rows(0, m).into_owned(), omega.rows(m, p).into_owned()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationProblem {
    pub theta: Mat,
    pub s_omega: usize,
    pub s_psi: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub max_iter: usize,
    pub inner_dim: usize,
}

impl FactorizationProblem {
    /// Defaults: `beta = 1.1`, 100 000 iterations, square inner dimension.
    pub fn new(theta: Mat, s_omega: usize, s_psi: usize) -> Self {
        let inner_dim = theta.ncols();
        Self {
            theta,
            s_omega,
            s_psi,
            beta1: 1.1,
            beta2: 1.1,
            max_iter: 100_000,
            inner_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s_omega == 0 || self.s_psi == 0 {
            return Err(Error::Parameter("sparsity budgets must be at least 1".into()));
        }
        if !(self.beta1 > 1.0 && self.beta2 > 1.0) {
            return Err(Error::Parameter(format!(
                "step multipliers must exceed 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.inner_dim == 0 {
            return Err(Error::Parameter("inner dimension must be positive".into()));
        }
        if !all_finite(&self.theta) {
            return Err(Error::InvalidModel("theta has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    pub omega: Mat,
    pub psi: Mat,
    /// Residual after every completed iteration.
    pub residual_history: Vec<f64>,
}

impl Factorization {
    pub fn residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn iterations(&self) -> usize {
        self.residual_history.len()
    }

    /// Whether the residual never rose by more than `slack` between iterations.
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.residual_history.windows(2).all(|w| w[1] <= w[0] + slack)
    }
}

const NORM_FLOOR: f64 = 1e-12;
const REL_STOP: f64 = 1e-10;

/// Runs PALM from `(omega0, psi0)`.
///
/// Each iteration takes a gradient step on `Omega` with step
/// `1 / (beta1 ||Psi Psi'||_F)` followed by hard thresholding to `s_omega`
/// entries, then the symmetric update on `Psi`. Stops after `max_iter`
/// iterations or when the relative residual change falls below 1e-10.
pub fn palm_factorize(prob: &FactorizationProblem, omega0: &Mat, psi0: &Mat) -> Result<Factorization> {
    prob.validate()?;
    let (rows, cols, k) = (prob.theta.nrows(), prob.theta.ncols(), prob.inner_dim);
    if omega0.shape() != (rows, k) || psi0.shape() != (k, cols) {
        return Err(Error::Dimension(format!(
            "initial factors {:?} x {:?} do not multiply to theta {:?}",
            omega0.shape(),
            psi0.shape(),
            prob.theta.shape()
        )));
    }
    let theta = &prob.theta;
    let mut omega = omega0.clone();
    let mut psi = psi0.clone();
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..prob.max_iter {
        let lip_omega = (&psi * psi.transpose()).norm().max(NORM_FLOOR);
        let grad = (&omega * &psi - theta) * psi.transpose();
        omega = hard_threshold(&(&omega - grad / (prob.beta1 * lip_omega)), prob.s_omega);

        let lip_psi = (omega.transpose() * &omega).norm().max(NORM_FLOOR);
        let grad = omega.transpose() * (&omega * &psi - theta);
        psi = hard_threshold(&(&psi - grad / (prob.beta2 * lip_psi)), prob.s_psi);

        if !all_finite(&omega) || !all_finite(&psi) {
            return Err(Error::Divergence(format!(
                "PALM iterate became non-finite after {} iterations",
                history.len()
            )));
        }
        let res = factorization_residual(theta, &omega, &psi);
        let prev = history.last().copied();
        history.push(res);
        if let Some(prev) = prev {
            if (prev - res).abs() <= REL_STOP * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    Ok(Factorization {
        omega,
        psi,
        residual_history: history,
    })
}

/// How the PALM iteration is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PalmInit {
    /// `Omega0 = Theta`, `Psi0 = I`: the single-layer network itself.
    Identity,
    /// `Omega0 = [I; R Gamma^-1]`, `Psi0 = Gamma` where `R` is the read-out
    /// block of `Theta`: the recurrent weights move into the second layer and
    /// the first layer starts as the identity. Requires an invertible `Gamma`
    /// and a square inner dimension.
    #[default]
    LayerSwap,
    /// Gaussian factors scaled by `1/sqrt(k)`, seeded.
    Random { seed: u64 },
}

impl PalmInit {
    /// Initial factors for `theta` with `p` read-out rows and inner dimension `k`.
    pub fn initial_factors(&self, theta: &Mat, p: usize, k: usize) -> Result<(Mat, Mat)> {
        let (rows, m) = theta.shape();
        if p > rows || rows - p != m {
            return Err(Error::Dimension(format!(
                "theta {:?} is not a square recurrent block stacked on {p} read-out rows",
                theta.shape()
            )));
        }
        match self {
            PalmInit::Identity => {
                if k != m {
                    return Err(Error::Parameter(
                        "identity start needs inner dimension equal to the neuron count".into(),
                    ));
                }
                Ok((theta.clone(), Mat::identity(m, m)))
            }
            PalmInit::LayerSwap => {
                if k != m {
                    return Err(Error::Parameter(
                        "layer-swap start needs inner dimension equal to the neuron count".into(),
                    ));
                }
                let gamma = theta.rows(0, m).into_owned();
                let readout = theta.rows(m, p).into_owned();
                let inv = gamma.clone().try_inverse().ok_or_else(|| {
                    Error::Numerical("synaptic matrix is singular; layer-swap start unavailable".into())
                })?;
                let mut omega = Mat::zeros(rows, m);
                omega.view_mut((0, 0), (m, m)).fill_with_identity();
                omega.view_mut((m, 0), (p, m)).copy_from(&(readout * inv));
                Ok((omega, gamma))
            }
            PalmInit::Random { seed } => {
                let mut rng = StdRng::seed_from_u64(*seed);
                let scale = 1.0 / (k as f64).sqrt();
                let mut normal = || -> f64 {
                    // Box-Muller
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * scale
                };
                let omega = Mat::from_fn(rows, k, |_, _| normal());
                let psi = Mat::from_fn(k, m, |_, _| normal());
                Ok((omega, psi))
            }
        }
    }
}

impl fmt::Display for PalmInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PalmInit::Identity => f.write_str("identity"),
            PalmInit::LayerSwap => f.write_str("layer_swap"),
            PalmInit::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for PalmInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PalmInit::Identity),
            "layer_swap" | "layer-swap" => Ok(PalmInit::LayerSwap),
            other => match other.strip_prefix("random:").map(str::parse::<u64>) {
                Some(Ok(seed)) => Ok(PalmInit::Random { seed }),
                _ => Err(Error::Unknown {
                    kind: "PALM initialization",
                    name: s.to_string(),
                }),
            },
        }
    }
}

/// Sparsity summary of a factor pair.
pub fn factor_nnz(f: &Factorization) -> (usize, usize) {
    (nnz(&f.omega), nnz(&f.psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn threshold_keeps_largest() {
        let m = Mat::from_row_slice(2, 2, &[3.0, -5.0, 1.0, 2.0]);
        assert_eq!(hard_threshold(&m, 2), Mat::from_row_slice(2, 2, &[3.0, -5.0, 0.0, 0.0]));
        assert_eq!(hard_threshold(&m, 4), m);
        assert_eq!(hard_threshold(&m, 10), m);
        assert_eq!(hard_threshold(&m, 0), Mat::zeros(2, 2));
    }

    #[test]
    fn threshold_ties_follow_row_major_order() {
        let m = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(hard_threshold(&m, 2), Mat::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]));
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let theta = Mat::identity(12, 12);
        let prob = FactorizationProblem::new(theta.clone(), 144, 144);
        let f = palm_factorize(&prob, &theta, &Mat::identity(12, 12)).unwrap();
        assert_eq!(f.residual_history[0], 0.0);
        assert_eq!(f.omega, theta);
    }

    #[test]
    fn rank_one_recovery() {
        let a = nalgebra::DVector::from_column_slice(&[1.0, -2.0, 0.5, 0.0]);
        let b = nalgebra::DVector::from_column_slice(&[0.3, 1.0, -1.0]);
        let theta = &a * b.transpose();
        let mut prob = FactorizationProblem::new(theta.clone(), 4, 3);
        prob.inner_dim = 1;
        prob.max_iter = 50_000;
        let omega0 = Mat::from_element(4, 1, 1.0);
        let psi0 = Mat::from_element(1, 3, 1.0);
        let f = palm_factorize(&prob, &omega0, &psi0).unwrap();
        assert!(f.residual() <= 1e-6, "residual {}", f.residual());
    }

    #[test]
    fn split_and_restack() {
        let omega = Mat::from_fn(13, 12, |i, j| (i * 12 + j) as f64);
        let (o1, o2) = split_factors(&omega, 1).unwrap();
        assert_eq!(o1.shape(), (12, 12));
        assert_eq!(o2.shape(), (1, 12));
        let mut back = Mat::zeros(13, 12);
        back.view_mut((0, 0), (12, 12)).copy_from(&o1);
        back.view_mut((12, 0), (1, 12)).copy_from(&o2);
        assert_eq!(back, omega);
        assert!(split_factors(&omega, 14).is_err());
    }

    #[test]
    fn residual_edge_cases() {
        let theta = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(factorization_residual(&theta, &theta, &Mat::identity(2, 2)), 0.0);
        assert_relative_eq!(
            factorization_residual(&theta, &Mat::zeros(2, 2), &Mat::identity(2, 2)),
            theta.norm()
        );
    }

    #[test]
    fn parameter_validation() {
        let theta = Mat::identity(2, 2);
        let mut prob = FactorizationProblem::new(theta.clone(), 0, 4);
        assert!(palm_factorize(&prob, &theta, &theta).is_err());
        prob.s_omega = 4;
        prob.beta1 = 1.0;
        assert!(matches!(
            palm_factorize(&prob, &theta, &theta),
            Err(Error::Parameter(_))
        ));
        prob.beta1 = 1.1;
        assert!(matches!(
            palm_factorize(&prob, &Mat::zeros(3, 2), &theta),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn init_strategies_parse_and_shape() {
        assert_eq!("identity".parse::<PalmInit>().unwrap(), PalmInit::Identity);
        assert_eq!("layer-swap".parse::<PalmInit>().unwrap(), PalmInit::LayerSwap);
        assert_eq!("random:7".parse::<PalmInit>().unwrap(), PalmInit::Random { seed: 7 });
        assert!("bogus".parse::<PalmInit>().is_err());

        let theta = Mat::from_row_slice(3, 2, &[2.0, 1.0, 1.0, 3.0, 0.5, -0.5]);
        let (o, p) = PalmInit::LayerSwap.initial_factors(&theta, 1, 2).unwrap();
        assert_relative_eq!(o * p, theta, epsilon = 1e-14);
        let (o, p) = PalmInit::Random { seed: 3 }.initial_factors(&theta, 1, 2).unwrap();
        assert_eq!((o.shape(), p.shape()), ((3, 2), (2, 2)));
        let again = PalmInit::Random { seed: 3 }.initial_factors(&theta, 1, 2).unwrap();
        assert_eq!(again.0, o);
    }
}
