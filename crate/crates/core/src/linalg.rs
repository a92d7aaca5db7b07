//! Small dense linear-algebra helpers shared by the numeric modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric within `tol` (relative to the largest entry) with a positive smallest eigenvalue.
pub fn is_spd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() || m.nrows() == 0 || !all_finite(m) {
        return false;
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > tol * scale {
        return false;
    }
    min_eigenvalue(m) > 0.0
}

pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() || !all_finite(m) {
        return false;
    }
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= tol * scale && min_eigenvalue(m) >= -tol * scale
}

/// Clamp eigenvalues from below at `floor`, returning a symmetric matrix.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return symmetrize(m);
    }
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&vals) * v.transpose()))
}

/// Matrix exponential. Delegates to nalgebra's Padé scaling-and-squaring.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !all_finite(m) {
        return Err(Error::numerical("matrix exponential of non-finite input"));
    }
    let e = m.exp();
    if !all_finite(&e) {
        return Err(Error::numerical("matrix exponential overflow"));
    }
    Ok(e)
}

pub fn quad_form(inv: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    d.dot(&(inv * d))
}

/// Dense solver for `A X + X Aᵀ = C` through the Kronecker system
/// `(I ⊗ A + A ⊗ I) vec(X) = vec(C)`. The LU factorization is kept so repeated
/// right-hand sides against one `A` cost a pair of triangular solves.
#[derive(Debug, Clone)]
pub struct LyapunovSolver {
    n: usize,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl LyapunovSolver {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::input("Lyapunov operator must be square"));
        }
        if !all_finite(a) {
            return Err(Error::numerical("Lyapunov operator has non-finite entries"));
        }
        let n = a.nrows();
        let mut k = DMatrix::<f64>::zeros(n * n, n * n);
        // column-major vec: index(i, j) = i + n j
        for j in 0..n {
            for i in 0..n {
                let row = i + n * j;
                for p in 0..n {
                    // (I ⊗ A): X[p, j] contributes A[i, p]
                    k[(row, p + n * j)] += a[(i, p)];
                    // (A ⊗ I): X[i, p] contributes A[j, p]
                    k[(row, i + n * p)] += a[(j, p)];
                }
            }
        }
        let lu = k.lu();
        let u = lu.u();
        let diag_max = u.diagonal().amax();
        let diag_min = u.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if diag_max == 0.0 || diag_min <= 1e-13 * diag_max {
            return Err(Error::solver(
                "Lyapunov operator is singular (eigenvalues of A sum to zero)",
                diag_min,
            ));
        }
        Ok(Self { n, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.n;
        if c.nrows() != n || c.ncols() != n {
            return Err(Error::input(format!(
                "right-hand side is {}x{}, expected {n}x{n}",
                c.nrows(),
                c.ncols()
            )));
        }
        let rhs = DVector::from_column_slice(c.as_slice());
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::solver("singular Kronecker system", f64::NAN))?;
        let x = DMatrix::from_column_slice(n, n, x.as_slice());
        if !all_finite(&x) {
            return Err(Error::numerical("Lyapunov solution not finite"));
        }
        Ok(symmetrize(&x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_lifts_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let f = floor_eigenvalues(&m, 1e-12);
        assert!(min_eigenvalue(&f) >= 1e-12 * 0.999);
        assert!((f[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn lyapunov_scalar() {
        let s = LyapunovSolver::new(&DMatrix::from_element(1, 1, -1.0)).unwrap();
        let x = s.solve(&DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert!((x[(0, 0)] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_rejects_singular_operator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(LyapunovSolver::new(&a).is_err());
    }

    #[test]
    fn spd_checks() {
        assert!(is_spd(&DMatrix::identity(3, 3), 1e-10));
        assert!(!is_spd(&DMatrix::zeros(3, 3), 1e-10));
        assert!(is_psd(&DMatrix::zeros(3, 3), 1e-10));
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(!is_spd(&skew, 1e-10));
    }
}
