//! Taped assembly of the objective pieces shared by the gradient estimators
//! and the full model: the surrogate-local value, the two local KLs, and the
//! recognition inner product.

use crate::error::Result;

use super::chain::{TapedChain, TapedChainResult};
use super::hmm::{TapedHmm, TapedHmmResult};
use super::meanfield::{pair_score, TapedGlobals};
use super::tape::{Tape, VarId};

/// ⟨λ, E_q t(z)⟩ on tape: Σ_t r_t·E[z_t] - ½⟨R_t, E[z_t z_tᵀ]⟩.
pub fn recog_dot_stats(
    tape: &mut Tape,
    recog: &[(VarId, VarId)],
    res: &TapedChainResult,
) -> VarId {
    let mut total: Option<VarId> = None;
    for (t, (r, rr)) in recog.iter().enumerate() {
        let a = tape.dot(*r, res.mean[t]);
        let b = tape.dot(*rr, res.second[t]);
        let nb = tape.scale(b, -0.5);
        let term = tape.add(a, nb);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    total.expect("at least one step")
}

/// E[logZ of the z-prior factors]: init_log_norm + Σ_t Σ_j q_tj·log_norm_j.
pub fn expected_prior_log_norm(
    tape: &mut Tape,
    g: &TapedGlobals,
    q_marg: &[VarId],
) -> VarId {
    let mut total = g.init.log_norm;
    for q in q_marg {
        for (j, blk) in g.trans.iter().enumerate() {
            let w = tape.slice(*q, j, 0, 1, 1);
            let term = tape.mul(w, blk.log_norm);
            total = tape.add(total, term);
        }
    }
    total
}

/// Continuous local KL at the block optimum:
/// ⟨λ, μ_z⟩ - logZ(ω_z) + E[logZ(θ-factors)].
pub fn local_kl_continuous(
    tape: &mut Tape,
    g: &TapedGlobals,
    recog: &[(VarId, VarId)],
    res: &TapedChainResult,
    q_marg: &[VarId],
) -> VarId {
    let dot = recog_dot_stats(tape, recog, res);
    let prior_norm = expected_prior_log_norm(tape, g, q_marg);
    let d1 = tape.sub(dot, res.log_z);
    tape.add(d1, prior_norm)
}

/// Discrete local KL: ⟨obs, marginals⟩ - logZ(ω_k).
pub fn local_kl_discrete(
    tape: &mut Tape,
    omega_k: &TapedHmm,
    res: &TapedHmmResult,
) -> VarId {
    let mut dot: Option<VarId> = None;
    for (o, m) in omega_k.obs.iter().zip(&res.marginal) {
        let term = tape.dot(*o, *m);
        dot = Some(match dot {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let dot = dot.expect("at least one discrete step");
    tape.sub(dot, res.log_z)
}

/// The full surrogate-local value, exact for any (ω_z, ω_k) state — the taped
/// mirror of [`crate::meanfield::surrogate_local`].
#[allow(clippy::too_many_arguments)]
pub fn surrogate_local(
    tape: &mut Tape,
    g: &TapedGlobals,
    recog: &[(VarId, VarId)],
    omega_z: &TapedChain,
    chain_res: &TapedChainResult,
    omega_k: &TapedHmm,
    hmm_res: &TapedHmmResult,
) -> VarId {
    let t_len = recog.len();
    // ⟨E-init + λ, singleton stats⟩
    let a0 = tape.dot(g.init.h0, chain_res.mean[0]);
    let b0 = tape.dot(g.init.j0, chain_res.second[0]);
    let nb0 = tape.scale(b0, -0.5);
    let mut value = tape.add(a0, nb0);
    let rd = recog_dot_stats(tape, recog, chain_res);
    value = tape.add(value, rd);
    // CROSS with normalizers, weighted by current marginals.
    for t in 0..t_len - 1 {
        for (j, blk) in g.trans.iter().enumerate() {
            let w = tape.slice(hmm_res.marginal[t], j, 0, 1, 1);
            let s = pair_score(tape, blk, chain_res, t);
            let sn = tape.sub(s, blk.log_norm);
            let term = tape.mul(w, sn);
            value = tape.add(value, term);
        }
    }
    value = tape.sub(value, g.init.log_norm);
    // + logZ(ω_z) - ⟨ω_z, μ_z⟩
    let oa = tape.dot(omega_z.init_h, chain_res.mean[0]);
    let ob = tape.dot(omega_z.init_j, chain_res.second[0]);
    let onb = tape.scale(ob, -0.5);
    let mut omega_dot = tape.add(oa, onb);
    let ord = recog_dot_stats(tape, &omega_z.recog, chain_res);
    omega_dot = tape.add(omega_dot, ord);
    for (t, tr) in omega_z.trans.iter().enumerate() {
        let s = super::meanfield::pair_score_blocks(
            tape, tr.h1, tr.j11, tr.j12, tr.j22, tr.h2, chain_res, t,
        );
        omega_dot = tape.add(omega_dot, s);
    }
    value = tape.add(value, chain_res.log_z);
    value = tape.sub(value, omega_dot);
    // + logZ(ω_k) - ⟨obs, q⟩
    let kl_k = local_kl_discrete(tape, omega_k, hmm_res);
    value = tape.sub(value, kl_k);
    value
}

/// ELBO/surrogate from parts: -(prior_kl + local - recon_or_dot).
pub fn objective_from_parts(
    tape: &mut Tape,
    prior_kl: Option<VarId>,
    local_kl_z: VarId,
    local_kl_k: Option<VarId>,
    recon_or_dot: VarId,
) -> VarId {
    let mut total = local_kl_z;
    if let Some(k) = local_kl_k {
        total = tape.add(total, k);
    }
    if let Some(p) = prior_kl {
        total = tape.add(total, p);
    }
    let neg = tape.neg(total);
    tape.add(neg, recon_or_dot)
}

/// Sanity check used in tests: evaluate surrogate_local on plain inputs.
pub fn eval_surrogate_local_plain(
    g: &crate::meanfield::GlobalExpectedStats,
    recog_vals: &[(crate::linalg::Vec64, crate::linalg::Mat)],
    omega_z: &crate::chain::ChainPotentials,
    omega_k: &crate::hmm::HmmPotentials,
) -> Result<f64> {
    let mut tape = Tape::new();
    let globals = TapedGlobals::leaves_from(&mut tape, g);
    let recog: Vec<(VarId, VarId)> = recog_vals
        .iter()
        .map(|(r, rr)| (tape.leaf_vec(r), tape.leaf(rr.clone())))
        .collect();
    let chain = TapedChain::leaves_from(&mut tape, omega_z);
    let chain_res = super::chain::filter_smooth(&mut tape, &chain)?;
    let hmm = TapedHmm::leaves_from(&mut tape, omega_k);
    let hmm_res = super::hmm::forward_backward(&mut tape, &hmm)?;
    let v = surrogate_local(
        &mut tape, &globals, &recog, &chain, &chain_res, &hmm, &hmm_res,
    );
    Ok(tape.scalar(v))
}
