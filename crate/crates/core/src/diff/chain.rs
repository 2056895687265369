//! Taped mirror of the sequential Gaussian-chain belief propagation. The
//! recursions are identical to [`crate::chain`]; forward agreement is tested,
//! and the tape provides gradients of logZ, the expected statistics, and
//! reparameterized posterior samples with respect to the chain potentials.

use nalgebra::DMatrix;

use crate::chain::ChainPotentials;
use crate::error::Result;
use crate::linalg::Mat;
use crate::rng::SeqRng;

use super::tape::{Tape, VarId};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Chain potentials as tape variables.
#[derive(Debug, Clone)]
pub struct TapedChain {
    pub d: usize,
    pub init_h: VarId,
    pub init_j: VarId,
    pub trans: Vec<TapedTransition>,
    pub recog: Vec<(VarId, VarId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct TapedTransition {
    pub h1: VarId,
    pub j11: VarId,
    pub j12: VarId,
    pub j22: VarId,
    pub h2: VarId,
}

impl TapedChain {
    /// Load plain potentials as leaves (each block becomes a leaf).
    pub fn leaves_from(tape: &mut Tape, p: &ChainPotentials) -> Self {
        let d = p.dim();
        let init_h = tape.leaf_vec(&p.init_h);
        let init_j = tape.leaf(p.init_j.clone());
        let trans = p
            .trans
            .iter()
            .map(|tr| TapedTransition {
                h1: tape.leaf_vec(&tr.h1),
                j11: tape.leaf(tr.j11.clone()),
                j12: tape.leaf(tr.j12.clone()),
                j22: tape.leaf(tr.j22.clone()),
                h2: tape.leaf_vec(&tr.h2),
            })
            .collect();
        let recog = p
            .recog
            .iter()
            .map(|(r, rr)| (tape.leaf_vec(r), tape.leaf(rr.clone())))
            .collect();
        TapedChain {
            d,
            init_h,
            init_j,
            trans,
            recog,
        }
    }

    pub fn len(&self) -> usize {
        self.recog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recog.is_empty()
    }
}

/// Filtered/smoothed messages and expected statistics, all tape variables.
#[derive(Debug, Clone)]
pub struct TapedChainResult {
    pub filt_f: Vec<VarId>,
    pub filt_big: Vec<VarId>,
    pub pred_f: Vec<VarId>,
    pub pred_big: Vec<VarId>,
    pub p_mats: Vec<VarId>,
    pub log_z: VarId,
    pub smooth_f: Vec<VarId>,
    pub smooth_big: Vec<VarId>,
    pub c_mats: Vec<VarId>,
    pub mean: Vec<VarId>,
    pub cov: Vec<VarId>,
    pub second: Vec<VarId>,
    pub cross: Vec<VarId>,
}

/// Taped filter + smoother + expected statistics + logZ.
pub fn filter_smooth(tape: &mut Tape, chain: &TapedChain) -> Result<TapedChainResult> {
    let t_len = chain.len();
    let d = chain.d;

    let mut filt_f = Vec::with_capacity(t_len);
    let mut filt_big = Vec::with_capacity(t_len);
    let mut pred_f = Vec::with_capacity(t_len - 1);
    let mut pred_big = Vec::with_capacity(t_len - 1);
    let mut p_mats = Vec::with_capacity(t_len - 1);

    filt_f.push(tape.add(chain.init_h, chain.recog[0].0));
    filt_big.push(tape.add(chain.init_j, chain.recog[0].1));

    let mut log_z_terms: Vec<VarId> = Vec::with_capacity(t_len);
    for (step, tr) in chain.trans.iter().enumerate() {
        let p = tape.add(filt_big[step], tr.j11);
        let resid = tape.sub(filt_f[step], tr.h1);
        let solved = tape.chol_solve(p, resid)?;
        let quad = tape.dot(resid, solved);
        let ld = tape.logdet(p)?;
        let diff = tape.sub(quad, ld);
        let half = tape.scale(diff, 0.5);
        log_z_terms.push(tape.offset(half, d as f64 / 2.0 * LN_2PI));

        let j12_t = tape.transpose(tr.j12);
        let jsol = tape.chol_solve(p, tr.j12)?;
        let corr = tape.matmul(j12_t, jsol);
        let big_pred = tape.sub(tr.j22, corr);
        let lin = tape.matmul(j12_t, solved);
        let pred = tape.add(tr.h2, lin);

        filt_f.push(tape.add(pred, chain.recog[step + 1].0));
        filt_big.push(tape.add(big_pred, chain.recog[step + 1].1));
        pred_f.push(pred);
        pred_big.push(big_pred);
        p_mats.push(p);
    }

    // Finalize.
    let last = t_len - 1;
    let solved = tape.chol_solve(filt_big[last], filt_f[last])?;
    let quad = tape.dot(filt_f[last], solved);
    let ld = tape.logdet(filt_big[last])?;
    let diff = tape.sub(quad, ld);
    let half = tape.scale(diff, 0.5);
    log_z_terms.push(tape.offset(half, d as f64 / 2.0 * LN_2PI));
    let mut log_z = log_z_terms[0];
    for term in &log_z_terms[1..] {
        log_z = tape.add(log_z, *term);
    }

    // Smoother.
    let mut smooth_f = vec![filt_f[last]; t_len];
    let mut smooth_big = vec![filt_big[last]; t_len];
    let mut c_mats = vec![filt_big[last]; t_len.saturating_sub(1)];
    for step in (0..t_len - 1).rev() {
        let tr = &chain.trans[step];
        let d1 = tape.sub(smooth_big[step + 1], pred_big[step]);
        let ct = tape.add(d1, tr.j22);
        let r1 = tape.sub(smooth_f[step + 1], pred_f[step]);
        let resid = tape.add(r1, tr.h2);
        let j12_t = tape.transpose(tr.j12);
        let ct_j12t = tape.chol_solve(ct, j12_t)?; // C⁻¹ J12ᵀ
        let corr = tape.matmul(tr.j12, ct_j12t); // J12 C⁻¹ J12ᵀ... via (C⁻¹J12ᵀ)
        let s1 = tape.add(filt_big[step], tr.j11);
        smooth_big[step] = tape.sub(s1, corr);
        let solved = tape.chol_solve(ct, resid)?;
        let lin = tape.matmul(tr.j12, solved);
        let f1 = tape.sub(filt_f[step], tr.h1);
        smooth_f[step] = tape.add(f1, lin);
        c_mats[step] = ct;
    }

    // Moments.
    let eye = tape.constant(Mat::identity(d, d));
    let mut mean = Vec::with_capacity(t_len);
    let mut cov = Vec::with_capacity(t_len);
    let mut second = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let sigma = tape.chol_solve(smooth_big[t], eye)?;
        let mu = tape.chol_solve(smooth_big[t], smooth_f[t])?;
        let mu_t = tape.transpose(mu);
        let outer = tape.matmul(mu, mu_t);
        second.push(tape.add(outer, sigma));
        mean.push(mu);
        cov.push(sigma);
    }
    let mut cross = Vec::with_capacity(t_len - 1);
    for step in 0..t_len - 1 {
        let j12_t = tape.transpose(chain.trans[step].j12);
        let ct_j12t = tape.chol_solve(c_mats[step], j12_t)?;
        let j12_ct = tape.transpose(ct_j12t); // J12 C⁻¹
        let half = tape.matmul(cov[step], j12_ct);
        let mu_next_t = tape.transpose(mean[step + 1]);
        let outer = tape.matmul(mean[step], mu_next_t);
        cross.push(tape.add(half, outer));
    }

    Ok(TapedChainResult {
        filt_f,
        filt_big,
        pred_f,
        pred_big,
        p_mats,
        log_z,
        smooth_f,
        smooth_big,
        c_mats,
        mean,
        cov,
        second,
        cross,
    })
}

/// Reparameterized joint posterior sample on the tape: the noise draws are
/// recorded as constants so gradients flow through means and precisions only.
pub fn sample_posterior(
    tape: &mut Tape,
    chain: &TapedChain,
    result: &TapedChainResult,
    rng: &mut SeqRng,
) -> Result<Vec<VarId>> {
    let t_len = chain.len();
    let d = chain.d;
    let mut out = vec![result.filt_f[0]; t_len];

    let draw = |tape: &mut Tape, rng: &mut SeqRng| {
        let eps = DMatrix::from_fn(d, 1, |_, _| rng.normal());
        tape.constant(eps)
    };

    let last = t_len - 1;
    {
        let mean = tape.chol_solve(result.filt_big[last], result.filt_f[last])?;
        let l = tape.chol_lower(result.filt_big[last])?;
        let eps = draw(tape, rng);
        let noise = tape.solve_lower_transposed(l, eps)?;
        out[last] = tape.add(mean, noise);
    }
    for step in (0..t_len - 1).rev() {
        let tr = &chain.trans[step];
        let coupled = tape.matmul(tr.j12, out[step + 1]);
        let l1 = tape.sub(result.filt_f[step], tr.h1);
        let lin = tape.add(l1, coupled);
        let prec = result.p_mats[step];
        let mean = tape.chol_solve(prec, lin)?;
        let l = tape.chol_lower(prec)?;
        let eps = draw(tape, rng);
        let noise = tape.solve_lower_transposed(l, eps)?;
        out[step] = tape.add(mean, noise);
    }
    Ok(out)
}
