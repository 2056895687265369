//! Small dense linear-algebra helpers shared across the inference modules.
//!
//! Everything routes through Cholesky: solves never form explicit inverses
//! unless a covariance is the requested output.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SvaeError};

pub type Mat = DMatrix<f64>;
pub type Vec64 = DVector<f64>;

/// Symmetrize in place-ish: (A + Aᵀ)/2.
pub fn sym(a: &Mat) -> Mat {
    (a + a.transpose()) * 0.5
}

/// Cholesky of the symmetrized input, failing with `NotSpd`.
pub fn chol(a: &Mat, context: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(sym(a)).ok_or(SvaeError::NotSpd(context))
}

/// A⁻¹ b for SPD A.
pub fn spd_solve_vec(a: &Mat, b: &Vec64, context: &'static str) -> Result<Vec64> {
    Ok(chol(a, context)?.solve(b))
}

/// A⁻¹ B for SPD A.
pub fn spd_solve_mat(a: &Mat, b: &Mat, context: &'static str) -> Result<Mat> {
    Ok(chol(a, context)?.solve(b))
}

/// log|A| for SPD A.
pub fn spd_logdet(a: &Mat, context: &'static str) -> Result<f64> {
    let c = chol(a, context)?;
    Ok(2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// bᵀ A⁻¹ b for SPD A.
pub fn quad_solve(a: &Mat, b: &Vec64, context: &'static str) -> Result<f64> {
    Ok(b.dot(&spd_solve_vec(a, b, context)?))
}

/// Frobenius inner product ⟨A, B⟩ = Σᵢⱼ AᵢⱼBᵢⱼ.
pub fn frob(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn is_finite_mat(a: &Mat) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn is_finite_vec(a: &Vec64) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Maximum absolute entrywise difference.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_vec(a: &Vec64, b: &Vec64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
