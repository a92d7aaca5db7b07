//! Ellipsoids `{x : (x−c)ᵀQ⁻¹(x−c) ≤ 1}` and the concentric Minkowski-sum approximation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_spd, symmetrize};

/// Added to combined shapes before inversion.
pub const SHAPE_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        if shape.nrows() != center.len() {
            return Err(Error::input("center and shape dimensions differ"));
        }
        if !is_spd(&shape, 1e-10) {
            return Err(Error::input("shape matrix is not symmetric positive definite"));
        }
        Ok(Self { center, shape })
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, DMatrix::identity(n, n) * (radius * radius))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::input("point dimension differs from ellipsoid"));
        }
        let d = x - &self.center;
        let v = self
            .shape
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numerical("shape lost definiteness"))?
            .solve(&d);
        Ok(d.dot(&v) <= 1.0 + 1e-12)
    }

    pub fn translate(&self, c: &DVector<f64>) -> Result<Self> {
        if c.len() != self.dim() {
            return Err(Error::input("translation dimension differs from ellipsoid"));
        }
        Ok(Self {
            center: c.clone(),
            shape: self.shape.clone(),
        })
    }

    /// Exact overlap test: the center offset must lie in the Minkowski sum of the
    /// origin-centered copies, which is the intersection over λ ∈ (0,1) of the
    /// ellipsoids with shape `Q₁/λ + Q₂/(1−λ)`.
    pub fn intersects_exact(&self, other: &Ellipsoid) -> Result<bool> {
        check_pair(self, other)?;
        let d = &other.center - &self.center;
        Ok(max_parametric_form(&self.shape, &other.shape, &d) <= 1.0 + 1e-12)
    }

    /// Approximate overlap test through the combined shape `Q₁ ⊞ Q₂`.
    pub fn intersects(&self, other: &Ellipsoid) -> Result<bool> {
        check_pair(self, other)?;
        Ok(separation_margin(&self.center, &other.center, &self.shape, &other.shape)? <= 0.0)
    }
}

fn check_pair(a: &Ellipsoid, b: &Ellipsoid) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::input("ellipsoids have different dimensions"));
    }
    Ok(())
}

/// `max over λ` of `dᵀ(Q₁/λ + Q₂/(1−λ))⁻¹d`, by golden-section search on the concave objective.
pub fn max_parametric_form(q1: &DMatrix<f64>, q2: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    if d.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let f = |l: f64| {
        let m = q1 / l + q2 / (1.0 - l);
        match m.cholesky() {
            Some(c) => d.dot(&c.solve(d)),
            None => f64::INFINITY,
        }
    };
    let gr = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    let mut x1 = hi - gr * (hi - lo);
    let mut x2 = lo + gr * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + gr * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - gr * (hi - lo);
            f1 = f(x1);
        }
    }
    f1.max(f2)
}

/// `(Σ √tr Qᵢ)(Σ Qᵢ/√tr Qᵢ)`. Zero matrices are skipped; an all-zero list yields zero.
pub fn boxplus(shapes: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = shapes.first().ok_or_else(|| Error::input("boxplus of an empty list"))?;
    let n = first.nrows();
    let mut root_sum = 0.0;
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for q in shapes {
        if q.shape() != (n, n) {
            return Err(Error::input("boxplus operands differ in dimension"));
        }
        if q.iter().all(|&v| v == 0.0) {
            continue;
        }
        if !is_spd(q, 1e-10) {
            return Err(Error::input("boxplus operand is not symmetric positive definite"));
        }
        let s = q.trace().sqrt();
        root_sum += s;
        acc += q / s;
    }
    Ok(symmetrize(&(acc * root_sum)))
}

/// Boxplus without the definiteness check. Accepts PSD operands, which appear
/// when channel shapes are rank-deficient. Zero-trace operands are skipped.
pub fn boxplus_psd(shapes: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = shapes[0].nrows();
    let mut root_sum = 0.0;
    let mut acc = DMatrix::<f64>::zeros(n, n);
    for q in shapes {
        let tr = q.trace();
        if tr <= 0.0 {
            continue;
        }
        let s = tr.sqrt();
        root_sum += s;
        acc += *q / s;
    }
    symmetrize(&(acc * root_sum))
}

/// Inverse of `Qᵢ ⊞ Qⱼ + 1e-9·I`.
pub fn combined_inverse(qi: &DMatrix<f64>, qj: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = qi.nrows();
    let s = boxplus_psd(&[qi, qj]) + DMatrix::identity(n, n) * SHAPE_REGULARIZATION;
    let inv = s
        .cholesky()
        .ok_or_else(|| Error::numerical("combined shape is singular"))?
        .inverse();
    Ok(symmetrize(&inv))
}

/// ξ = (pᵢ−pⱼ)ᵀ(Qᵢ ⊞ Qⱼ)⁻¹(pᵢ−pⱼ) − 1.
pub fn separation_margin(pi: &DVector<f64>, pj: &DVector<f64>, qi: &DMatrix<f64>, qj: &DMatrix<f64>) -> Result<f64> {
    let n = pi.len();
    if pj.len() != n || qi.shape() != (n, n) || qj.shape() != (n, n) {
        return Err(Error::input("separation margin dimensions differ"));
    }
    let inv = combined_inverse(qi, qj)?;
    let d = pi - pj;
    Ok(d.dot(&(inv * &d)) - 1.0)
}
