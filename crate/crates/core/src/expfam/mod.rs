//! Exponential-family distributions: MVN, NIW, MNIW, Dirichlet, Categorical.
//!
//! Each family is described by its natural-parameter map from canonical
//! parameters, expected sufficient statistics, and log partition function.
//! Parameters are carried as flat vectors in a fixed packing order (matrices
//! row-major, symmetric matrices stored full); inner products between natural
//! parameters and statistics are then plain dot products, which makes the
//! pairing ⟨η, t⟩ correct without any triangle bookkeeping.
//!
//! All log partition functions include their constant terms (e.g. (n/2)·log 2π)
//! so that gradients and normalization oracles match exactly.

pub mod special;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SvaeError};
use crate::linalg::{self, Mat, Vec64};
use special::{digamma, digamma_multivariate, log_multivariate_gamma, logsumexp};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_2: f64 = std::f64::consts::LN_2;

/// Which exponential family a parameter vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Multivariate normal over ℝⁿ.
    Mvn { n: usize },
    /// Normal inverse Wishart over (μ, Σ).
    Niw { n: usize },
    /// Matrix normal inverse Wishart over (X, Σ) with X ∈ ℝ^{n×m}.
    Mniw { n: usize, m: usize },
    /// Dirichlet over the (k-1)-simplex.
    Dirichlet { k: usize },
    /// Categorical over k outcomes, parameterized by logits.
    Categorical { k: usize },
}

impl Family {
    /// Length of the flat parameter/statistic vector.
    pub fn len(&self) -> usize {
        match *self {
            Family::Mvn { n } => n + n * n,
            Family::Niw { n } => n * n + n + 2,
            Family::Mniw { n, m } => n * n + n * m + m * m + 1,
            Family::Dirichlet { k } | Family::Categorical { k } => k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_dims(&self) -> Result<()> {
        let ok = match *self {
            Family::Mvn { n } | Family::Niw { n } => n >= 1,
            Family::Mniw { n, m } => n >= 1 && m >= 1,
            Family::Dirichlet { k } | Family::Categorical { k } => k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(SvaeError::Domain(format!("invalid dims in {self:?}")))
        }
    }
}

/// Flat natural-parameter vector tagged with its family.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub family: Family,
    pub data: Vec<f64>,
}

/// Flat expected-sufficient-statistics vector, same packing as `NaturalParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanParams {
    pub family: Family,
    pub data: Vec<f64>,
}

pub(crate) fn pack_mat(out: &mut Vec<f64>, m: &Mat) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

pub(crate) fn unpack_mat(data: &[f64], rows: usize, cols: usize) -> Mat {
    Mat::from_row_slice(rows, cols, &data[..rows * cols])
}

impl NaturalParams {
    pub fn new(family: Family, data: Vec<f64>) -> Result<Self> {
        family.check_dims()?;
        if data.len() != family.len() {
            return Err(SvaeError::DimMismatch(format!(
                "natural params for {:?} need length {}, got {}",
                family,
                family.len(),
                data.len()
            )));
        }
        Ok(NaturalParams { family, data })
    }

    /// Validate family-specific invariants (symmetry, positivity, dof bounds).
    pub fn validate(&self) -> Result<()> {
        const SYM_TOL: f64 = 1e-12;
        let sym_ok = |m: &Mat| linalg::max_abs_diff(m, &m.transpose()) <= SYM_TOL;
        match self.family {
            Family::Mvn { n } => {
                let h = unpack_mat(&self.data[n..], n, n);
                if !sym_ok(&h) {
                    return Err(SvaeError::Domain("MVN precision block not symmetric".into()));
                }
            }
            Family::Niw { n } => {
                let (_, _, lambda, nu) = self.niw_blocks();
                if lambda <= 0.0 {
                    return Err(SvaeError::Domain(format!("NIW lambda must be > 0: {lambda}")));
                }
                if nu <= n as f64 - 1.0 {
                    return Err(SvaeError::Domain(format!("NIW nu must be > n-1: {nu}")));
                }
                let eta1 = unpack_mat(&self.data, n, n);
                if !sym_ok(&eta1) {
                    return Err(SvaeError::Domain("NIW scale block not symmetric".into()));
                }
            }
            Family::Mniw { n, m } => {
                let (eta1, _, eta3, nu) = self.mniw_blocks();
                if nu - (n + m) as f64 - 1.0 <= n as f64 - 1.0 {
                    return Err(SvaeError::Domain(format!("MNIW nu out of range: {nu}")));
                }
                if !sym_ok(&eta1) || !sym_ok(&eta3) {
                    return Err(SvaeError::Domain("MNIW SPD block not symmetric".into()));
                }
            }
            Family::Dirichlet { .. } => {
                if self.data.iter().any(|&e| e + 1.0 <= 0.0) {
                    return Err(SvaeError::Domain(
                        "Dirichlet concentrations must be > 0".into(),
                    ));
                }
            }
            Family::Categorical { .. } => {}
        }
        Ok(())
    }

    fn niw_blocks(&self) -> (Mat, Vec64, f64, f64) {
        let n = match self.family {
            Family::Niw { n } => n,
            _ => unreachable!(),
        };
        let eta1 = unpack_mat(&self.data, n, n);
        let eta2 = Vec64::from_column_slice(&self.data[n * n..n * n + n]);
        (eta1, eta2, self.data[n * n + n], self.data[n * n + n + 1])
    }

    fn mniw_blocks(&self) -> (Mat, Mat, Mat, f64) {
        let (n, m) = match self.family {
            Family::Mniw { n, m } => (n, m),
            _ => unreachable!(),
        };
        let eta1 = unpack_mat(&self.data, n, n);
        let eta2 = unpack_mat(&self.data[n * n..], n, m);
        let eta3 = unpack_mat(&self.data[n * n + n * m..], m, m);
        (eta1, eta2, eta3, self.data[n * n + n * m + m * m])
    }
}

/// Canonical parameters recovered from natural parameters.
#[derive(Debug, Clone)]
pub enum Canonical {
    Mvn { mean: Vec64, cov: Mat },
    Niw { s: Mat, m: Vec64, lambda: f64, nu: f64 },
    Mniw { s: Mat, m: Mat, v: Mat, nu: f64 },
    Dirichlet { alpha: Vec<f64> },
    Categorical { logits: Vec<f64> },
}

/// Evaluate the multivariate normal from canonical (mean, covariance).
pub fn mvn_eval(mean: &Vec64, cov: &Mat) -> Result<(NaturalParams, MeanParams, f64)> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(SvaeError::DimMismatch("MVN covariance shape".into()));
    }
    let chol = linalg::chol(cov, "mvn_eval covariance")?;
    let prec = chol.inverse();
    let h = &prec * mean;

    let mut eta = Vec::with_capacity(n + n * n);
    eta.extend(h.iter());
    pack_mat(&mut eta, &(&prec * -0.5));

    let second = mean * mean.transpose() + cov;
    let mut mu = Vec::with_capacity(n + n * n);
    mu.extend(mean.iter());
    pack_mat(&mut mu, &second);

    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let log_z = 0.5 * mean.dot(&h) + 0.5 * logdet + n as f64 / 2.0 * LN_2PI;

    Ok((
        NaturalParams::new(Family::Mvn { n }, eta)?,
        MeanParams {
            family: Family::Mvn { n },
            data: mu,
        },
        log_z,
    ))
}

/// Evaluate the NIW from canonical (S, m, λ, ν).
pub fn niw_eval(s: &Mat, m: &Vec64, lambda: f64, nu: f64) -> Result<(NaturalParams, MeanParams, f64)> {
    let n = m.len();
    if s.nrows() != n || s.ncols() != n {
        return Err(SvaeError::DimMismatch("NIW scale shape".into()));
    }
    if lambda <= 0.0 {
        return Err(SvaeError::Domain(format!("NIW lambda must be > 0: {lambda}")));
    }
    if nu <= n as f64 - 1.0 {
        return Err(SvaeError::Domain(format!("NIW nu must be > n-1: {nu}")));
    }
    let chol = linalg::chol(s, "niw_eval scale")?;

    // η = [S + λ m mᵀ, λ m, λ, ν + n + 2]
    let mut eta = Vec::with_capacity(n * n + n + 2);
    pack_mat(&mut eta, &(s + (m * m.transpose()) * lambda));
    eta.extend((m * lambda).iter());
    eta.push(lambda);
    eta.push(nu + n as f64 + 2.0);

    // E[t] = [-½ν S⁻¹, ν S⁻¹ m, -½(n/λ + ν mᵀS⁻¹m), ½(n log2 - log|S| + Σψ((ν-i)/2))]
    let s_inv = chol.inverse();
    let s_inv_m = &s_inv * m;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let mut mu = Vec::with_capacity(n * n + n + 2);
    pack_mat(&mut mu, &(&s_inv * (-0.5 * nu)));
    mu.extend((&s_inv_m * nu).iter());
    mu.push(-0.5 * (n as f64 / lambda + nu * m.dot(&s_inv_m)));
    mu.push(0.5 * (n as f64 * LN_2 - logdet + digamma_multivariate(n, nu / 2.0)?));

    let log_z = nu / 2.0 * (n as f64 * LN_2 - logdet)
        + log_multivariate_gamma(n, nu / 2.0)?
        + n as f64 / 2.0 * (LN_2PI - lambda.ln());

    Ok((
        NaturalParams::new(Family::Niw { n }, eta)?,
        MeanParams {
            family: Family::Niw { n },
            data: mu,
        },
        log_z,
    ))
}

/// Evaluate the MNIW from canonical (S, M, V, ν) with X ∈ ℝ^{n×m}.
///
/// The last expected-statistic entry carries the ½ factor and the logZ term in V
/// is -(n/2)·log|V|; both forms are pinned by the grad-logZ = E[t] identity in
/// the test suite.
pub fn mniw_eval(s: &Mat, m: &Mat, v: &Mat, nu: f64) -> Result<(NaturalParams, MeanParams, f64)> {
    let n = s.nrows();
    let mm = v.nrows();
    if s.ncols() != n || m.nrows() != n || m.ncols() != mm || v.ncols() != mm {
        return Err(SvaeError::DimMismatch("MNIW block shapes".into()));
    }
    if nu <= n as f64 - 1.0 {
        return Err(SvaeError::Domain(format!("MNIW nu must be > n-1: {nu}")));
    }
    let chol_s = linalg::chol(s, "mniw_eval S")?;
    let chol_v = linalg::chol(v, "mniw_eval V")?;

    // η = [S + M V Mᵀ, M V, V, ν + n + m + 1]
    let mv = m * v;
    let mut eta = Vec::with_capacity(n * n + n * mm + mm * mm + 1);
    pack_mat(&mut eta, &(s + &mv * m.transpose()));
    pack_mat(&mut eta, &mv);
    pack_mat(&mut eta, v);
    eta.push(nu + (n + mm) as f64 + 1.0);

    // E[t] = [-½ν S⁻¹, ν S⁻¹ M, -½(n V⁻¹ + ν MᵀS⁻¹M), ½(n log2 - log|S| + Σψ((ν-i)/2))]
    let s_inv = chol_s.inverse();
    let v_inv = chol_v.inverse();
    let s_inv_m = &s_inv * m;
    let logdet_s = 2.0 * chol_s.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let logdet_v = 2.0 * chol_v.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let mut mu = Vec::with_capacity(eta.len());
    pack_mat(&mut mu, &(&s_inv * (-0.5 * nu)));
    pack_mat(&mut mu, &(&s_inv_m * nu));
    pack_mat(
        &mut mu,
        &((&v_inv * n as f64 + m.transpose() * &s_inv_m * nu) * -0.5),
    );
    mu.push(0.5 * (n as f64 * LN_2 - logdet_s + digamma_multivariate(n, nu / 2.0)?));

    let log_z = nu / 2.0 * (n as f64 * LN_2 - logdet_s) + log_multivariate_gamma(n, nu / 2.0)?
        - n as f64 / 2.0 * logdet_v
        + (n * mm) as f64 / 2.0 * LN_2PI;

    Ok((
        NaturalParams::new(Family::Mniw { n, m: mm }, eta)?,
        MeanParams {
            family: Family::Mniw { n, m: mm },
            data: mu,
        },
        log_z,
    ))
}

/// Evaluate the Dirichlet from its concentration vector.
pub fn dirichlet_eval(alpha: &[f64]) -> Result<(NaturalParams, MeanParams, f64)> {
    let k = alpha.len();
    if alpha.iter().any(|&a| a <= 0.0) {
        return Err(SvaeError::Domain(
            "Dirichlet concentrations must be > 0".into(),
        ));
    }
    let eta: Vec<f64> = alpha.iter().map(|a| a - 1.0).collect();
    let a0: f64 = alpha.iter().sum();
    let psi0 = digamma(a0)?;
    let mut mu = Vec::with_capacity(k);
    for &a in alpha {
        mu.push(digamma(a)? - psi0);
    }
    let mut log_z = -special::lgamma(a0)?;
    for &a in alpha {
        log_z += special::lgamma(a)?;
    }
    Ok((
        NaturalParams::new(Family::Dirichlet { k }, eta)?,
        MeanParams {
            family: Family::Dirichlet { k },
            data: mu,
        },
        log_z,
    ))
}

/// Evaluate the Categorical from logits.
pub fn categorical_eval(logits: &[f64]) -> Result<(NaturalParams, MeanParams, f64)> {
    let k = logits.len();
    let log_z = logsumexp(logits);
    let mu: Vec<f64> = logits.iter().map(|l| (l - log_z).exp()).collect();
    Ok((
        NaturalParams::new(Family::Categorical { k }, logits.to_vec())?,
        MeanParams {
            family: Family::Categorical { k },
            data: mu,
        },
        log_z,
    ))
}

/// Recover canonical parameters from natural parameters.
pub fn natural_to_canonical(eta: &NaturalParams) -> Result<Canonical> {
    match eta.family {
        Family::Mvn { n } => {
            let h = Vec64::from_column_slice(&eta.data[..n]);
            let big_h = unpack_mat(&eta.data[n..], n, n);
            let prec = linalg::sym(&big_h) * -2.0;
            let cov = linalg::chol(&prec, "natural_to_canonical MVN precision")?.inverse();
            let mean = &cov * &h;
            Ok(Canonical::Mvn { mean, cov })
        }
        Family::Niw { n } => {
            let (eta1, eta2, lambda, eta4) = eta.niw_blocks();
            if lambda <= 0.0 {
                return Err(SvaeError::Domain("NIW natural lambda block <= 0".into()));
            }
            let m = &eta2 / lambda;
            let s = linalg::sym(&eta1) - (&eta2 * eta2.transpose()) / lambda;
            let nu = eta4 - n as f64 - 2.0;
            Ok(Canonical::Niw { s, m, lambda, nu })
        }
        Family::Mniw { n, m: mm } => {
            let (eta1, eta2, eta3, eta4) = eta.mniw_blocks();
            let v = linalg::sym(&eta3);
            let v_chol = linalg::chol(&v, "natural_to_canonical MNIW V")?;
            let m_mat = v_chol.solve(&eta2.transpose()).transpose();
            let s = linalg::sym(&eta1) - &m_mat * &v * m_mat.transpose();
            let nu = eta4 - (n + mm) as f64 - 1.0;
            Ok(Canonical::Mniw { s, m: m_mat, v, nu })
        }
        Family::Dirichlet { .. } => Ok(Canonical::Dirichlet {
            alpha: eta.data.iter().map(|e| e + 1.0).collect(),
        }),
        Family::Categorical { .. } => Ok(Canonical::Categorical {
            logits: eta.data.clone(),
        }),
    }
}

/// Expected statistics and log partition function at a natural parameter point.
pub fn eval_natural(eta: &NaturalParams) -> Result<(MeanParams, f64)> {
    match natural_to_canonical(eta)? {
        Canonical::Mvn { mean, cov } => {
            let (_, mu, log_z) = mvn_eval(&mean, &cov)?;
            Ok((mu, log_z))
        }
        Canonical::Niw { s, m, lambda, nu } => {
            let (_, mu, log_z) = niw_eval(&s, &m, lambda, nu)?;
            Ok((mu, log_z))
        }
        Canonical::Mniw { s, m, v, nu } => {
            let (_, mu, log_z) = mniw_eval(&s, &m, &v, nu)?;
            Ok((mu, log_z))
        }
        Canonical::Dirichlet { alpha } => {
            let (_, mu, log_z) = dirichlet_eval(&alpha)?;
            Ok((mu, log_z))
        }
        Canonical::Categorical { logits } => {
            let (_, mu, log_z) = categorical_eval(&logits)?;
            Ok((mu, log_z))
        }
    }
}

/// Log partition function at a natural parameter point.
pub fn log_partition(eta: &NaturalParams) -> Result<f64> {
    Ok(eval_natural(eta)?.1)
}

/// KL(p(·;η1) ‖ p(·;η2)) = ⟨η1-η2, E₁[t]⟩ - logZ(η1) + logZ(η2).
pub fn kl_divergence(eta1: &NaturalParams, eta2: &NaturalParams) -> Result<f64> {
    if eta1.family != eta2.family {
        return Err(SvaeError::FamilyMismatch(format!(
            "{:?} vs {:?}",
            eta1.family, eta2.family
        )));
    }
    let (mu1, log_z1) = eval_natural(eta1)?;
    let log_z2 = log_partition(eta2)?;
    let dot: f64 = eta1
        .data
        .iter()
        .zip(eta2.data.iter())
        .zip(mu1.data.iter())
        .map(|((a, b), t)| (a - b) * t)
        .sum();
    Ok(dot - log_z1 + log_z2)
}

/// Convenience: build a DVector/DMatrix view of a packed block.
pub fn block_vec(data: &[f64], offset: usize, len: usize) -> Vec64 {
    DVector::from_column_slice(&data[offset..offset + len])
}

pub fn block_mat(data: &[f64], offset: usize, rows: usize, cols: usize) -> Mat {
    DMatrix::from_row_slice(rows, cols, &data[offset..offset + rows * cols])
}
