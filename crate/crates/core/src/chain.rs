//! Sequential information-form belief propagation on the Gaussian chain:
//! filter, smoother, posterior sampler, and log partition function.
//!
//! The chain is a product of an initial factor (h0, J0), pairwise transition
//! factors with natural parameters (-h1, -½J11, J12, -½J22, h2) on the
//! statistics (z_t, z_t z_tᵀ, z_t z_{t+1}ᵀ, z_{t+1} z_{t+1}ᵀ, z_{t+1}), and
//! per-step recognition factors (r_t, R_t). Every Gaussian elimination tracks
//! its (D/2)·log 2π constant so logZ equals the dense joint-Gaussian value.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SvaeError};
use crate::linalg::{self, Mat, Vec64};
use crate::rng::SeqRng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One pairwise transition factor between z_t and z_{t+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionPotential {
    pub h1: Vec64,
    pub j11: Mat,
    pub j12: Mat,
    pub j22: Mat,
    pub h2: Vec64,
}

impl TransitionPotential {
    pub fn zeros(d: usize) -> Self {
        TransitionPotential {
            h1: Vec64::zeros(d),
            j11: Mat::zeros(d, d),
            j12: Mat::zeros(d, d),
            j22: Mat::zeros(d, d),
            h2: Vec64::zeros(d),
        }
    }

    pub fn scale(&self, w: f64) -> Self {
        TransitionPotential {
            h1: &self.h1 * w,
            j11: &self.j11 * w,
            j12: &self.j12 * w,
            j22: &self.j22 * w,
            h2: &self.h2 * w,
        }
    }

    pub fn add_assign_scaled(&mut self, other: &TransitionPotential, w: f64) {
        self.h1 += &other.h1 * w;
        self.j11 += &other.j11 * w;
        self.j12 += &other.j12 * w;
        self.j22 += &other.j22 * w;
        self.h2 += &other.h2 * w;
    }
}

/// Per-timestep Gaussian-chain factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPotentials {
    pub init_h: Vec64,
    pub init_j: Mat,
    /// Transition factors; `trans[t]` couples z_{t+1} and z_{t+2} (0-based: index
    /// p couples steps p and p+1). Length T-1.
    pub trans: Vec<TransitionPotential>,
    /// Recognition potentials (r_t, R_t); length T.
    pub recog: Vec<(Vec64, Mat)>,
}

impl ChainPotentials {
    pub fn len(&self) -> usize {
        self.recog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recog.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.init_h.len()
    }

    pub fn check(&self) -> Result<()> {
        let t = self.recog.len();
        if t == 0 {
            return Err(SvaeError::DimMismatch("chain needs T >= 1".into()));
        }
        if self.trans.len() + 1 != t {
            return Err(SvaeError::DimMismatch(format!(
                "chain has {} recognition steps but {} transitions",
                t,
                self.trans.len()
            )));
        }
        let d = self.dim();
        if self.init_j.nrows() != d || self.init_j.ncols() != d {
            return Err(SvaeError::DimMismatch("init precision shape".into()));
        }
        Ok(())
    }

    /// Dense joint precision and linear term over all T·D variables, plus the
    /// total 2π constant. Used by the oracle tests and kept here so the
    /// convention is written down exactly once.
    pub fn dense_joint(&self) -> (Vec64, Mat, f64) {
        let t = self.len();
        let d = self.dim();
        let n = t * d;
        let mut h = Vec64::zeros(n);
        let mut j = Mat::zeros(n, n);
        h.rows_mut(0, d).copy_from(&self.init_h);
        j.view_mut((0, 0), (d, d)).add_assign(&self.init_j);
        for (step, (r, rr)) in self.recog.iter().enumerate() {
            h.rows_mut(step * d, d).add_assign(r);
            j.view_mut((step * d, step * d), (d, d)).add_assign(rr);
        }
        for (p, tr) in self.trans.iter().enumerate() {
            let (a, b) = (p * d, (p + 1) * d);
            h.rows_mut(a, d).add_assign(-&tr.h1);
            h.rows_mut(b, d).add_assign(&tr.h2);
            j.view_mut((a, a), (d, d)).add_assign(&tr.j11);
            j.view_mut((b, b), (d, d)).add_assign(&tr.j22);
            j.view_mut((a, b), (d, d)).add_assign(-&tr.j12);
            j.view_mut((b, a), (d, d)).add_assign(-tr.j12.transpose());
        }
        (h, j, n as f64 / 2.0 * LN_2PI)
    }
}

/// Output of the forward pass.
#[derive(Debug, Clone)]
pub struct FilterResult {
    /// Filtered natural parameters (f_{t|t}, F_{t|t}), length T.
    pub f: Vec<Vec64>,
    pub big_f: Vec<Mat>,
    /// Predicted natural parameters (f_{t+1|t}, F_{t+1|t}), length T-1.
    pub fp: Vec<Vec64>,
    pub big_fp: Vec<Mat>,
    /// Predict intermediates P_t = F_{t|t} + J11,t, length T-1.
    pub p: Vec<Mat>,
    pub log_z: f64,
}

/// Output of the backward smoothing pass.
#[derive(Debug, Clone)]
pub struct SmoothResult {
    /// Smoothed natural parameters (f_{t|T}, F_{t|T}), length T.
    pub fs: Vec<Vec64>,
    pub big_fs: Vec<Mat>,
    /// Smoother intermediates C_t, length T-1.
    pub c: Vec<Mat>,
    /// E[z_t], length T.
    pub mean: Vec<Vec64>,
    /// E[z_t z_tᵀ], length T.
    pub second: Vec<Mat>,
    /// E[z_t z_{t+1}ᵀ], length T-1.
    pub cross: Vec<Mat>,
}

impl SmoothResult {
    /// Cov(z_t) = F_{t|T}⁻¹.
    pub fn cov(&self, t: usize) -> Mat {
        &self.second[t] - &self.mean[t] * self.mean[t].transpose()
    }
}

/// Forward (filtering) pass with logZ accumulation.
pub fn kalman_filter(p: &ChainPotentials) -> Result<FilterResult> {
    p.check()?;
    let t_len = p.len();
    let d = p.dim();

    let mut f = Vec::with_capacity(t_len);
    let mut big_f = Vec::with_capacity(t_len);
    let mut fp = Vec::with_capacity(t_len.saturating_sub(1));
    let mut big_fp = Vec::with_capacity(t_len.saturating_sub(1));
    let mut p_list = Vec::with_capacity(t_len.saturating_sub(1));
    let mut log_z = 0.0;

    f.push(&p.init_h + &p.recog[0].0);
    big_f.push(&p.init_j + &p.recog[0].1);

    for (step, tr) in p.trans.iter().enumerate() {
        let pt = &big_f[step] + &tr.j11;
        let chol = linalg::chol(&pt, "kalman_filter P_t")?;
        let resid = &f[step] - &tr.h1;
        let solved = chol.solve(&resid);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        log_z += 0.5 * (resid.dot(&solved) - logdet) + d as f64 / 2.0 * LN_2PI;

        let jt_solve = chol.solve(&tr.j12);
        let big_pred = &tr.j22 - tr.j12.transpose() * &jt_solve;
        let pred = &tr.h2 + tr.j12.transpose() * &solved;

        let (r, rr) = &p.recog[step + 1];
        f.push(&pred + r);
        big_f.push(&big_pred + rr);
        fp.push(pred);
        big_fp.push(big_pred);
        p_list.push(pt);
    }

    // Finalize: ½(fᵀF⁻¹f - log|F|) + (D/2)·log 2π for the last variable.
    let last = t_len - 1;
    let chol = linalg::chol(&big_f[last], "kalman_filter F_{T|T}")?;
    let solved = chol.solve(&f[last]);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    log_z += 0.5 * (f[last].dot(&solved) - logdet) + d as f64 / 2.0 * LN_2PI;

    Ok(FilterResult {
        f,
        big_f,
        fp,
        big_fp,
        p: p_list,
        log_z,
    })
}

/// Backward (smoothing) pass; consumes the filter output for the same chain.
pub fn kalman_smooth(p: &ChainPotentials, fr: &FilterResult) -> Result<SmoothResult> {
    let t_len = p.len();
    let mut fs = vec![Vec64::zeros(0); t_len];
    let mut big_fs = vec![Mat::zeros(0, 0); t_len];
    let mut c_list = vec![Mat::zeros(0, 0); t_len.saturating_sub(1)];

    fs[t_len - 1] = fr.f[t_len - 1].clone();
    big_fs[t_len - 1] = fr.big_f[t_len - 1].clone();

    for step in (0..t_len - 1).rev() {
        let tr = &p.trans[step];
        let ct = &big_fs[step + 1] - &fr.big_fp[step] + &tr.j22;
        let chol = linalg::chol(&ct, "kalman_smooth C_t")?;
        let resid = &fs[step + 1] - &fr.fp[step] + &tr.h2;
        let j12_ct = chol.solve(&tr.j12.transpose()).transpose(); // J12 C⁻¹
        big_fs[step] = &fr.big_f[step] + &tr.j11 - &j12_ct * tr.j12.transpose();
        fs[step] = &fr.f[step] - &tr.h1 + &tr.j12 * chol.solve(&resid);
        c_list[step] = ct;
    }

    // Expected statistics from the smoothed marginals.
    let mut mean = Vec::with_capacity(t_len);
    let mut second = Vec::with_capacity(t_len);
    let mut cov = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let chol = linalg::chol(&big_fs[t], "kalman_smooth F_{t|T}")?;
        let sigma = chol.inverse();
        let mu = &sigma * &fs[t];
        second.push(&mu * mu.transpose() + &sigma);
        mean.push(mu);
        cov.push(sigma);
    }
    let mut cross = Vec::with_capacity(t_len.saturating_sub(1));
    for step in 0..t_len - 1 {
        let chol = linalg::chol(&c_list[step], "kalman_smooth C_t")?;
        let j12_ct = chol.solve(&p.trans[step].j12.transpose()).transpose();
        cross.push(&cov[step] * &j12_ct + &mean[step] * mean[step + 1].transpose());
    }

    Ok(SmoothResult {
        fs,
        big_fs,
        c: c_list,
        mean,
        second,
        cross,
    })
}

/// One joint posterior sample via the backward information-form sampler.
/// Deterministic for a fixed `rng` state.
pub fn sample_posterior(
    p: &ChainPotentials,
    fr: &FilterResult,
    rng: &mut SeqRng,
) -> Result<Vec<Vec64>> {
    let t_len = p.len();
    let d = p.dim();
    let mut out = vec![Vec64::zeros(d); t_len];

    // z_T ~ N with precision F_{T|T} and linear term f_{T|T}.
    out[t_len - 1] = sample_info_form(&fr.big_f[t_len - 1], &fr.f[t_len - 1], rng, d)?;
    for step in (0..t_len - 1).rev() {
        let tr = &p.trans[step];
        let lin = &fr.f[step] - &tr.h1 + &tr.j12 * &out[step + 1];
        let prec = &fr.big_f[step] + &tr.j11;
        out[step] = sample_info_form(&prec, &lin, rng, d)?;
    }
    Ok(out)
}

/// Draw from N(prec⁻¹ lin, prec⁻¹): mean + L⁻ᵀ ε with prec = L Lᵀ.
fn sample_info_form(prec: &Mat, lin: &Vec64, rng: &mut SeqRng, d: usize) -> Result<Vec64> {
    let chol = linalg::chol(prec, "sample_posterior precision")?;
    let mean = chol.solve(lin);
    let eps = DVector::from_iterator(d, (0..d).map(|_| rng.normal()));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or(SvaeError::NotSpd("sample_posterior triangular solve"))?;
    Ok(mean + noise)
}

/// Dense joint-Gaussian evaluation of the same chain. Quadratic in T·D; the
/// independent oracle for the recursive algorithms.
pub struct DenseOracle {
    pub mean: Vec<Vec64>,
    pub cov_blocks: Vec<Vec<Mat>>, // cov_blocks[i][j] = Cov(z_i, z_j), j >= i
    pub log_z: f64,
}

pub fn dense_oracle(p: &ChainPotentials) -> Result<DenseOracle> {
    let (h, j, const_term) = p.dense_joint();
    let t = p.len();
    let d = p.dim();
    let chol = linalg::chol(&j, "dense_oracle joint precision")?;
    let cov = chol.inverse();
    let mu = &cov * &h;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let log_z = 0.5 * h.dot(&mu) - 0.5 * logdet + const_term;
    let mut mean = Vec::with_capacity(t);
    for i in 0..t {
        mean.push(Vec64::from(mu.rows(i * d, d)));
    }
    let mut cov_blocks = Vec::with_capacity(t);
    for i in 0..t {
        let mut row = Vec::with_capacity(t - i);
        for jj in i..t {
            row.push(Mat::from(cov.view((i * d, jj * d), (d, d))));
        }
        cov_blocks.push(row);
    }
    Ok(DenseOracle {
        mean,
        cov_blocks,
        log_z,
    })
}

/// Random well-conditioned chain instance for tests and benchmarks.
pub fn random_chain(t_len: usize, d: usize, rng: &mut SeqRng) -> ChainPotentials {
    let spd = |rng: &mut SeqRng, scale: f64| -> Mat {
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        &a * a.transpose() * (scale / d as f64) + Mat::identity(d, d)
    };
    let vecr = |rng: &mut SeqRng| -> Vec64 { DVector::from_fn(d, |_, _| rng.normal()) };

    let init_j = spd(rng, 0.5);
    let init_h = vecr(rng);
    let mut trans = Vec::with_capacity(t_len.saturating_sub(1));
    for _ in 0..t_len.saturating_sub(1) {
        // Build from a random (A, b, Q): guarantees the pair block is PSD and
        // the joint chain precision is SPD.
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal() * 0.6 / (d as f64).sqrt());
        let b = vecr(rng);
        let q = spd(rng, 0.3);
        let qinv = nalgebra::Cholesky::new(q).unwrap().inverse();
        trans.push(TransitionPotential {
            h1: a.transpose() * &qinv * &b,
            j11: a.transpose() * &qinv * &a,
            j12: a.transpose() * &qinv,
            j22: qinv.clone(),
            h2: &qinv * &b,
        });
    }
    let mut recog = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let diag = DVector::from_fn(d, |_, _| 0.2 + rng.uniform());
        recog.push((vecr(rng), Mat::from_diagonal(&diag)));
    }
    ChainPotentials {
        init_h,
        init_j,
        trans,
        recog,
    }
}
