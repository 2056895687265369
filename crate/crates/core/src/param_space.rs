//! Invertible maps between unconstrained vectors and constrained parameter
//! blocks: positivity via softplus, the simplex via softmax with an appended
//! zero logit, and SPD matrices via a standard-deviation/correlation-Cholesky
//! factorization S = diag(σ)·R·diag(σ).
//!
//! Besides forward and inverse, each bijector exposes the directional
//! derivative of its inverse, which is the building block of the natural
//! gradient: the backward pass through an unconstrained-to-constrained map is
//! replaced by a forward-mode pass through the inverse.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SvaeError};
use crate::linalg::{Mat, Vec64};

/// Minimum eigenvalue (via Cholesky of the shifted matrix) accepted by the SPD
/// inverse; below this the inverse/JVP blow up.
const SPD_MIN_EIG: f64 = 1e-12;
/// Simplex entries below this are treated as on the boundary.
const SIMPLEX_MIN: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub enum Bijector {
    Identity { dim: usize },
    Softplus { dim: usize },
    /// softplus + shift, for parameters constrained to (shift, ∞).
    ShiftedSoftplus { dim: usize, shift: f64 },
    /// Takes k-1 unconstrained logits, appends a zero, returns a k-simplex point.
    SimplexSoftmax { k: usize },
    /// SPD n×n via S = diag(σ)·R·diag(σ); unconstrained layout is
    /// [n softplus entries for σ, n(n-1)/2 row-major strictly-lower entries for R].
    SpdCorrelationCholesky { n: usize },
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_inv(y: f64) -> f64 {
    // log(e^y - 1) = y + log(1 - e^-y)
    y + (-(-y).exp()).ln_1p()
}

/// d softplus⁻¹ / dy = 1 / (1 - e^{-y}).
pub fn softplus_inv_deriv(y: f64) -> f64 {
    1.0 / (-(-y).exp()).ln_1p().exp()
}

impl Bijector {
    pub fn unconstrained_dim(&self) -> usize {
        match *self {
            Bijector::Identity { dim }
            | Bijector::Softplus { dim }
            | Bijector::ShiftedSoftplus { dim, .. } => dim,
            Bijector::SimplexSoftmax { k } => k - 1,
            Bijector::SpdCorrelationCholesky { n } => n + n * (n - 1) / 2,
        }
    }

    pub fn constrained_dim(&self) -> usize {
        match *self {
            Bijector::Identity { dim }
            | Bijector::Softplus { dim }
            | Bijector::ShiftedSoftplus { dim, .. } => dim,
            Bijector::SimplexSoftmax { k } => k,
            Bijector::SpdCorrelationCholesky { n } => n * n,
        }
    }

    /// Map unconstrained coordinates into the constraint set.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.unconstrained_dim() {
            return Err(SvaeError::DimMismatch(format!(
                "bijector forward expects length {}, got {}",
                self.unconstrained_dim(),
                x.len()
            )));
        }
        Ok(match *self {
            Bijector::Identity { .. } => x.to_vec(),
            Bijector::Softplus { .. } => x.iter().map(|&v| softplus(v)).collect(),
            Bijector::ShiftedSoftplus { shift, .. } => {
                x.iter().map(|&v| softplus(v) + shift).collect()
            }
            Bijector::SimplexSoftmax { k } => {
                let mut logits: Vec<f64> = x.to_vec();
                logits.push(0.0);
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                debug_assert_eq!(exps.len(), k);
                exps.into_iter().map(|e| e / total).collect()
            }
            Bijector::SpdCorrelationCholesky { n } => {
                let (sigma, l) = spd_factors(n, x);
                let r = &l * l.transpose();
                let mut s = r;
                for i in 0..n {
                    for j in 0..n {
                        s[(i, j)] *= sigma[i] * sigma[j];
                    }
                }
                s.as_slice().to_vec() // column-major == row-major for symmetric S
            }
        })
    }

    /// Map a strictly interior constrained point back to unconstrained coordinates.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.constrained_dim() {
            return Err(SvaeError::DimMismatch(format!(
                "bijector inverse expects length {}, got {}",
                self.constrained_dim(),
                y.len()
            )));
        }
        Ok(match *self {
            Bijector::Identity { .. } => y.to_vec(),
            Bijector::Softplus { .. } => {
                for &v in y {
                    if v <= 0.0 {
                        return Err(SvaeError::Boundary(format!("softplus inverse of {v}")));
                    }
                }
                y.iter().map(|&v| softplus_inv(v)).collect()
            }
            Bijector::ShiftedSoftplus { shift, .. } => {
                for &v in y {
                    if v <= shift {
                        return Err(SvaeError::Boundary(format!(
                            "shifted softplus inverse of {v} with shift {shift}"
                        )));
                    }
                }
                y.iter().map(|&v| softplus_inv(v - shift)).collect()
            }
            Bijector::SimplexSoftmax { k } => {
                for &p in y {
                    if p < SIMPLEX_MIN {
                        return Err(SvaeError::Boundary(format!("simplex entry {p}")));
                    }
                }
                let log_last = y[k - 1].ln();
                y[..k - 1].iter().map(|&p| p.ln() - log_last).collect()
            }
            Bijector::SpdCorrelationCholesky { n } => {
                let s = DMatrix::from_row_slice(n, n, y);
                let (sigma, l) = spd_inverse_factors(n, &s)?;
                let mut out = Vec::with_capacity(self.unconstrained_dim());
                for i in 0..n {
                    out.push(softplus_inv(sigma[i]));
                }
                for i in 1..n {
                    for j in 0..i {
                        out.push(l[(i, j)] / l[(i, i)]);
                    }
                }
                out
            }
        })
    }

    /// Directional derivative of the inverse: (∂x/∂y)·tangent at the constrained
    /// point `y`. Linear in the tangent.
    pub fn jvp_inverse(&self, y: &[f64], tangent: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.constrained_dim() || tangent.len() != self.constrained_dim() {
            return Err(SvaeError::DimMismatch(
                "jvp_inverse point/tangent length".into(),
            ));
        }
        Ok(match *self {
            Bijector::Identity { .. } => tangent.to_vec(),
            Bijector::Softplus { .. } => {
                for &v in y {
                    if v <= 0.0 {
                        return Err(SvaeError::Boundary(format!("softplus jvp at {v}")));
                    }
                }
                y.iter()
                    .zip(tangent)
                    .map(|(&v, &t)| t * softplus_inv_deriv(v))
                    .collect()
            }
            Bijector::ShiftedSoftplus { shift, .. } => {
                for &v in y {
                    if v <= shift {
                        return Err(SvaeError::Boundary(format!("shifted softplus jvp at {v}")));
                    }
                }
                y.iter()
                    .zip(tangent)
                    .map(|(&v, &t)| t * softplus_inv_deriv(v - shift))
                    .collect()
            }
            Bijector::SimplexSoftmax { k } => {
                for &p in y {
                    if p < SIMPLEX_MIN {
                        return Err(SvaeError::Boundary(format!("simplex jvp at {p}")));
                    }
                }
                // x_i = log y_i - log y_k  =>  dx_i = dy_i/y_i - dy_k/y_k
                let last = tangent[k - 1] / y[k - 1];
                y[..k - 1]
                    .iter()
                    .zip(&tangent[..k - 1])
                    .map(|(&p, &t)| t / p - last)
                    .collect()
            }
            Bijector::SpdCorrelationCholesky { n } => {
                let s = DMatrix::from_row_slice(n, n, y);
                let ds = DMatrix::from_row_slice(n, n, tangent);
                let ds = crate::linalg::sym(&ds);
                spd_jvp_inverse(n, &s, &ds)?
            }
        })
    }
}

/// Build (σ, L) from the unconstrained layout: σ through softplus, L the
/// row-normalized unit-diagonal-seeded lower-triangular correlation factor.
fn spd_factors(n: usize, x: &[f64]) -> (Vec64, Mat) {
    let sigma = DVector::from_iterator(n, x[..n].iter().map(|&v| softplus(v)));
    let mut l = Mat::zeros(n, n);
    let mut idx = n;
    for i in 0..n {
        let mut row = vec![0.0; i + 1];
        for j in 0..i {
            row[j] = x[idx];
            idx += 1;
        }
        row[i] = 1.0;
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, v) in row.iter().enumerate() {
            l[(i, j)] = v / norm;
        }
    }
    (sigma, l)
}

/// Recover (σ, L) from an SPD matrix; L is the Cholesky factor of the
/// correlation matrix, which has unit row norms by construction.
fn spd_inverse_factors(n: usize, s: &Mat) -> Result<(Vec64, Mat)> {
    // Interior check: smallest eigenvalue above the tolerance.
    let shifted = crate::linalg::sym(s) - Mat::identity(n, n) * SPD_MIN_EIG;
    if nalgebra::Cholesky::new(shifted).is_none() {
        return Err(SvaeError::Boundary(
            "SPD input within eigenvalue tolerance of the boundary".into(),
        ));
    }
    let sigma = DVector::from_iterator(n, (0..n).map(|i| s[(i, i)].sqrt()));
    let mut r = s.clone();
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] /= sigma[i] * sigma[j];
        }
    }
    let chol = crate::linalg::chol(&r, "spd bijector correlation")?;
    Ok((sigma, chol.l()))
}

/// Lower triangle with halved diagonal; the projection appearing in Cholesky
/// differentials.
fn phi_lower(m: &Mat) -> Mat {
    let n = m.nrows();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            out[(i, j)] = if i == j { 0.5 * m[(i, j)] } else { m[(i, j)] };
        }
    }
    out
}

/// Directional derivative of the SPD inverse map at S along symmetric dS.
fn spd_jvp_inverse(n: usize, s: &Mat, ds: &Mat) -> Result<Vec<f64>> {
    let (sigma, l) = spd_inverse_factors(n, s)?;

    // σ_i = sqrt(S_ii)
    let dsigma = DVector::from_iterator(n, (0..n).map(|i| ds[(i, i)] / (2.0 * sigma[i])));

    // R = D⁻¹ S D⁻¹ with D = diag(σ):
    // dR = D⁻¹ dS D⁻¹ - (dρ R + R dρ), dρ = diag(dσ/σ)
    let mut r = s.clone();
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] /= sigma[i] * sigma[j];
        }
    }
    let mut dr = ds.clone();
    for i in 0..n {
        for j in 0..n {
            dr[(i, j)] /= sigma[i] * sigma[j];
        }
    }
    let rho = DVector::from_iterator(n, (0..n).map(|i| dsigma[i] / sigma[i]));
    for i in 0..n {
        for j in 0..n {
            dr[(i, j)] -= (rho[i] + rho[j]) * r[(i, j)];
        }
    }

    // dL = L·Φ(L⁻¹ dR L⁻ᵀ)
    let linv_dr = l
        .clone()
        .solve_lower_triangular(&dr)
        .ok_or(SvaeError::NotSpd("spd jvp triangular solve"))?;
    let linv_dr_linvt = l
        .clone()
        .solve_lower_triangular(&linv_dr.transpose())
        .ok_or(SvaeError::NotSpd("spd jvp triangular solve"))?
        .transpose();
    let dl = &l * phi_lower(&linv_dr_linvt);

    // x_diag: u_i = softplus⁻¹(σ_i); x_lower: x_ij = L_ij / L_ii
    let mut out = Vec::with_capacity(n + n * (n - 1) / 2);
    for i in 0..n {
        out.push(dsigma[i] * softplus_inv_deriv(sigma[i]));
    }
    for i in 1..n {
        for j in 0..i {
            out.push(dl[(i, j)] / l[(i, i)] - l[(i, j)] * dl[(i, i)] / (l[(i, i)] * l[(i, i)]));
        }
    }
    Ok(out)
}
