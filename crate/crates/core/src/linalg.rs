//! Dense linear-algebra helpers shared by the solvers.
//!
//! Everything here works on dynamically sized `nalgebra` matrices; the problems
//! handled by the toolkit are desk-scale (a few dozen rows at most).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn vec_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Matrix exponential by scaling and squaring around a truncated Taylor kernel.
pub fn expm(a: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expm needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !all_finite(a) {
        return Err(Error::InvalidModel(
            "non-finite entry in matrix exponential argument".into(),
        ));
    }
    let n = a.nrows();
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    // bring the scaled norm below 1/2
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let scaled = a * scale;
    let mut result = Mat::identity(n, n);
    let mut term = Mat::identity(n, n);
    for k in 1..=40 {
        term = &term * &scaled / k as f64;
        result += &term;
        if term.norm() <= 1e-18 * result.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(h: &Mat, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(h.clone()).ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

pub fn symmetric_part(w: &Mat) -> Mat {
    (w + w.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `w`, ascending.
pub fn sym_eigenvalues(w: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetric_part(w))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn max_sym_eigenvalue(w: &Mat) -> f64 {
    sym_eigenvalues(w).last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn spectral_radius(m: &Mat) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Solves `X = a^T X a + c` for symmetric `c` via the Kronecker form.
pub fn solve_discrete_lyapunov(a: &Mat, c: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let at = a.transpose();
    let kron = at.kronecker(&at);
    let lhs = Mat::identity(n * n, n * n) - kron;
    let rhs = Vector::from_column_slice(c.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular Lyapunov operator".into()))?;
    let x = Mat::from_column_slice(n, n, sol.as_slice());
    Ok(symmetric_part(&x))
}

/// Count of entries that are exactly nonzero.
pub fn nnz(m: &Mat) -> usize {
    m.iter().filter(|v| **v != 0.0).count()
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Block-diagonal matrix built from `blocks`.
pub fn block_diag(blocks: &[&Mat]) -> Mat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Mat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Converts a row-major nested vector into a matrix.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn diag(values: &[f64]) -> Mat {
    Mat::from_diagonal(&Vector::from_column_slice(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&Mat::zeros(3, 3)).unwrap();
        assert_relative_eq!(e, Mat::identity(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn expm_of_diagonal_and_rotation() {
        let e = expm(&diag(&[1.0, -2.0])).unwrap();
        assert_relative_eq!(e[(0, 0)], 1f64.exp(), epsilon = 1e-13);
        assert_relative_eq!(e[(1, 1)], (-2f64).exp(), epsilon = 1e-14);
        // generator of a rotation by 3 rad: large enough to exercise squaring
        let r = Mat::from_row_slice(2, 2, &[0.0, -3.0, 3.0, 0.0]);
        let e = expm(&r).unwrap();
        assert_relative_eq!(e[(0, 0)], 3f64.cos(), epsilon = 1e-13);
        assert_relative_eq!(e[(1, 0)], 3f64.sin(), epsilon = 1e-13);
    }

    #[test]
    fn lyapunov_scalar() {
        // x = 0.25 x + 1 -> x = 4/3
        let x = solve_discrete_lyapunov(&diag(&[0.5]), &diag(&[1.0])).unwrap();
        assert_relative_eq!(x[(0, 0)], 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn block_diag_layout() {
        let b = block_diag(&[&diag(&[1.0]), &Mat::from_element(2, 2, 2.0)]);
        assert_eq!(b.shape(), (3, 3));
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(0, 1)], 0.0);
        assert_eq!(b[(2, 2)], 2.0);
    }

    #[test]
    fn rows_roundtrip_and_ragged() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_rows(&to_rows(&m)).unwrap(), m);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
