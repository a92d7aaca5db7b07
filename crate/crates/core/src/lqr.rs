//! Continuous-time LQR through the algebraic Riccati equation.
//!
//! The stabilizing solution is seeded by the matrix sign function of the
//! Hamiltonian and polished with Newton–Kleinman steps.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{all_finite, is_psd, is_spd, symmetrize, LyapunovSolver};

/// Policy `u = ū + K e`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    pub k: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct LqrSolution {
    pub gain: FeedbackGain,
    pub p: DMatrix<f64>,
    /// Frobenius norm of the Riccati residual divided by the largest term's norm.
    pub residual: f64,
}

const RESIDUAL_TOL: f64 = 1e-8;

pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<FeedbackGain> {
    solve_care(a, b, q, r).map(|s| s.gain)
}

pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let rinv = match r.clone().try_inverse() {
        Some(m) => m,
        None => return f64::INFINITY,
    };
    let g = b * rinv * b.transpose();
    let atp = a.transpose() * p;
    let pgp = p * &g * p;
    let res = &atp + atp.transpose() - &pgp + q;
    let scale = 1.0f64.max(q.norm()).max(atp.norm()).max(pgp.norm());
    res.norm() / scale
}

pub fn closed_loop_is_stable(phi: &DMatrix<f64>) -> bool {
    phi.complex_eigenvalues().iter().all(|z| z.re < 0.0)
}

pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<LqrSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::input("inconsistent LQR dimensions"));
    }
    if !all_finite(a) || !all_finite(b) {
        return Err(Error::input("non-finite system matrices"));
    }
    if !is_psd(q, 1e-10) {
        return Err(Error::input("state weight must be positive semidefinite"));
    }
    if !is_spd(r, 1e-10) {
        return Err(Error::input("control weight must be positive definite"));
    }
    let rinv = symmetrize(&r.clone().try_inverse().ok_or_else(|| Error::input("singular control weight"))?);
    let g = symmetrize(&(b * &rinv * b.transpose()));

    let mut p = sign_function_seed(a, &g, q)?;
    let mut residual = riccati_residual(a, b, q, r, &p);
    for _ in 0..8 {
        if residual <= RESIDUAL_TOL * 1e-3 {
            break;
        }
        let k = &rinv * b.transpose() * &p;
        let ak = a - b * &k;
        if !closed_loop_is_stable(&ak) {
            break;
        }
        let rhs = -(q + k.transpose() * r * &k);
        let next = match LyapunovSolver::new(&ak.transpose()).and_then(|s| s.solve(&rhs)) {
            Ok(x) => x,
            Err(_) => break,
        };
        let next_res = riccati_residual(a, b, q, r, &next);
        if !(next_res < residual) {
            break;
        }
        p = next;
        residual = next_res;
    }

    let k = -(&rinv * b.transpose() * &p);
    let phi = a + b * &k;
    if !(residual <= RESIDUAL_TOL) {
        return Err(Error::solver("Riccati iteration did not reach tolerance", residual));
    }
    if !closed_loop_is_stable(&phi) {
        return Err(Error::solver("Riccati solution is not stabilizing; pair may not be stabilizable", residual));
    }
    Ok(LqrSolution {
        gain: FeedbackGain { k },
        p,
        residual,
    })
}

fn sign_function_seed(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut z = DMatrix::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(a);
    z.view_mut((0, n), (n, n)).copy_from(&(-g));
    z.view_mut((n, 0), (n, n)).copy_from(&(-q));
    z.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let zinv = lu
            .try_inverse()
            .ok_or_else(|| Error::solver("Hamiltonian iterate became singular; pair may not be stabilizable", f64::NAN))?;
        let c = if det.is_finite() && det != 0.0 {
            det.abs().powf(1.0 / (2.0 * n as f64))
        } else {
            1.0
        };
        let next = (&z / c + &zinv * c) * 0.5;
        if !all_finite(&next) {
            return Err(Error::solver("sign iteration diverged", f64::NAN));
        }
        let delta = (&next - &z).norm();
        let size = next.norm();
        z = next;
        if delta <= 1e-13 * size {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::solver(
            "sign iteration did not converge; Hamiltonian may have imaginary-axis eigenvalues",
            f64::NAN,
        ));
    }

    let w11 = z.view((0, 0), (n, n)).into_owned();
    let w12 = z.view((0, n), (n, n)).into_owned();
    let w21 = z.view((n, 0), (n, n)).into_owned();
    let w22 = z.view((n, n), (n, n)).into_owned();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::solver(format!("least-squares extraction failed: {e}"), f64::NAN))?;
    if !all_finite(&p) {
        return Err(Error::solver("Riccati seed not finite", f64::NAN));
    }
    Ok(symmetrize(&p))
}
