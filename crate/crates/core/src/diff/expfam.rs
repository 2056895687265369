//! Taped exponential-family factor graphs.
//!
//! Each global factor (NIW initial state, MNIW transitions, Dirichlet rows)
//! gets a graph from its unconstrained parameters to natural parameters,
//! expected statistics, log partition function, and prior-KL term.
//!
//! Two routes are provided. `Natural` inserts the natural-gradient custom
//! nodes (forward-mode inverse through the bijector and canonical-to-natural
//! maps) and a per-block straight-through on the η -> E[t] map, so that the
//! backward pass emits the unbiased natural-gradient direction in
//! unconstrained space. `Plain` wires everything with ordinary primitives and
//! yields the standard gradient.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::linalg::Mat;
use crate::param_space::Bijector;

use super::tape::{CustomMap, Tape, VarId};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const LN_2: f64 = std::f64::consts::LN_2;

/// How unconstrained parameters map into the loss graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRoute {
    /// Natural-gradient semantics: custom backward nodes + straight-through.
    Natural,
    /// Ordinary chain rule end to end.
    Plain,
}

/// SPD bijector forward built from ordinary tape ops (for the `Plain` route):
/// S = (σσᵀ) ∘ (LLᵀ) with σ = softplus(head) and L the row-normalized
/// unit-diagonal-seeded lower-triangular factor.
pub fn taped_spd_forward(tape: &mut Tape, u: VarId, n: usize) -> VarId {
    let sigma_u = tape.slice(u, 0, 0, n, 1);
    let sigma = tape.softplus(sigma_u);

    let mut rows: Vec<VarId> = Vec::with_capacity(n);
    let mut off = n;
    for i in 0..n {
        let mut parts: Vec<VarId> = Vec::new();
        if i > 0 {
            parts.push(tape.slice(u, off, 0, i, 1));
            off += i;
        }
        parts.push(tape.constant_scalar(1.0));
        if i + 1 < n {
            parts.push(tape.constant(Mat::zeros(n - 1 - i, 1)));
        }
        let raw = tape.concat_rows(&parts); // n×1 padded row
        // Normalize by the norm of the leading i+1 entries (the zeros do not
        // contribute).
        let sq = tape.mul(raw, raw);
        let total = tape.sum(sq);
        let nrm = tape.sqrt(total);
        let normed = tape.div(raw, nrm);
        rows.push(tape.transpose(normed)); // 1×n
    }
    let l = tape.concat_rows(&rows); // n×n lower-triangular
    let lt = tape.transpose(l);
    let r = tape.matmul(l, lt);
    let sig_t = tape.transpose(sigma);
    let outer = tape.matmul(sigma, sig_t);
    tape.mul(r, outer)
}

/// Simplex softmax forward from ordinary ops: K-1 logits -> K probabilities.
pub fn taped_simplex_forward(tape: &mut Tape, u: VarId, k: usize) -> VarId {
    let zero = tape.constant(Mat::zeros(1, 1));
    let logits = tape.concat_rows(&[u, zero]);
    let lse = tape.logsumexp_all(logits);
    let shifted = tape.sub(logits, lse);
    let _ = k;
    tape.exp(shifted)
}

/// NIW natural-parameter blocks on the tape.
#[derive(Debug, Clone, Copy)]
pub struct NiwEta {
    pub eta1: VarId,
    pub eta2: VarId,
    pub eta3: VarId,
    pub eta4: VarId,
}

/// NIW expected statistics (same block structure as the statistics).
#[derive(Debug, Clone, Copy)]
pub struct NiwMu {
    pub t1: VarId,
    pub t2: VarId,
    pub t3: VarId,
    pub t4: VarId,
}

/// Canonical blocks recovered on tape from NIW natural blocks.
fn niw_canonical(tape: &mut Tape, eta: NiwEta, n: usize) -> Result<(VarId, VarId, VarId, VarId)> {
    let lambda = eta.eta3;
    let m = tape.div(eta.eta2, lambda);
    let eta2_t = tape.transpose(eta.eta2);
    let outer = tape.matmul(eta.eta2, eta2_t);
    let scaled = tape.div(outer, lambda);
    let s = tape.sub(eta.eta1, scaled);
    let nu = tape.offset(eta.eta4, -(n as f64) - 2.0);
    Ok((s, m, lambda, nu))
}

/// Expected statistics and logZ of the NIW as tape functions of its natural
/// blocks.
pub fn niw_stats(tape: &mut Tape, eta: NiwEta, n: usize) -> Result<(NiwMu, VarId)> {
    let (s, m, lambda, nu) = niw_canonical(tape, eta, n)?;
    let eye = tape.constant(Mat::identity(n, n));
    let s_inv = tape.chol_solve(s, eye)?;
    let s_inv_m = tape.chol_solve(s, m)?;
    let nu_sinv = tape.mul(s_inv, nu);
    let t1 = tape.scale(nu_sinv, -0.5);
    let t2 = tape.mul(s_inv_m, nu);
    let quad = tape.dot(m, s_inv_m);
    let nq = tape.mul(quad, nu);
    let n_over_lambda = {
        let c = tape.constant_scalar(n as f64);
        tape.div(c, lambda)
    };
    let t3_sum = tape.add(n_over_lambda, nq);
    let t3 = tape.scale(t3_sum, -0.5);
    let logdet_s = tape.logdet(s)?;
    let mut dsum = {
        let h = tape.scale(nu, 0.5);
        tape.digamma(h)?
    };
    for i in 1..n {
        let shifted = tape.offset(nu, -(i as f64));
        let h = tape.scale(shifted, 0.5);
        let d = tape.digamma(h)?;
        dsum = tape.add(dsum, d);
    }
    let neg_ld = tape.neg(logdet_s);
    let inner = tape.offset(neg_ld, n as f64 * LN_2);
    let with_digamma = tape.add(inner, dsum);
    let t4 = tape.scale(with_digamma, 0.5);

    // logZ = (ν/2)(n log2 - log|S|) + logΓ_n(ν/2) + (n/2)(log2π - logλ)
    let half_nu = tape.scale(nu, 0.5);
    let first = tape.mul(half_nu, inner);
    let mut lg = {
        let a = tape.scale(nu, 0.5);
        tape.lgamma(a)?
    };
    for j in 2..=n {
        let a0 = tape.scale(nu, 0.5);
        let a = tape.offset(a0, (1.0 - j as f64) / 2.0);
        let term = tape.lgamma(a)?;
        lg = tape.add(lg, term);
    }
    let lg = tape.offset(lg, (n * (n - 1)) as f64 / 4.0 * std::f64::consts::PI.ln());
    let log_lambda = tape.log(lambda);
    let neg_ll = tape.neg(log_lambda);
    let lam_term = tape.offset(neg_ll, LN_2PI);
    let lam_scaled = tape.scale(lam_term, n as f64 / 2.0);
    let partial = tape.add(first, lg);
    let log_z = tape.add(partial, lam_scaled);

    Ok((NiwMu { t1, t2, t3, t4 }, log_z))
}

/// MNIW natural blocks.
#[derive(Debug, Clone, Copy)]
pub struct MniwEta {
    pub eta1: VarId,
    pub eta2: VarId,
    pub eta3: VarId,
    pub eta4: VarId,
}

#[derive(Debug, Clone, Copy)]
pub struct MniwMu {
    pub t1: VarId,
    pub t2: VarId,
    pub t3: VarId,
    pub t4: VarId,
}

fn mniw_canonical(
    tape: &mut Tape,
    eta: MniwEta,
    n: usize,
    m: usize,
) -> Result<(VarId, VarId, VarId, VarId)> {
    let v = eta.eta3;
    let eta2_t = tape.transpose(eta.eta2);
    let m_t = tape.chol_solve(v, eta2_t)?; // V⁻¹ η₂ᵀ = Mᵀ
    let m_mat = tape.transpose(m_t);
    let mv_mt = tape.matmul(eta.eta2, m_t); // η₂ V⁻¹ η₂ᵀ
    let s = tape.sub(eta.eta1, mv_mt);
    let nu = tape.offset(eta.eta4, -((n + m) as f64) - 1.0);
    Ok((s, m_mat, v, nu))
}

/// Expected statistics and logZ of the MNIW as tape functions of its natural
/// blocks. X is n×m.
pub fn mniw_stats(tape: &mut Tape, eta: MniwEta, n: usize, m: usize) -> Result<(MniwMu, VarId)> {
    let (s, m_mat, v, nu) = mniw_canonical(tape, eta, n, m)?;
    let eye_n = tape.constant(Mat::identity(n, n));
    let eye_m = tape.constant(Mat::identity(m, m));
    let s_inv = tape.chol_solve(s, eye_n)?;
    let v_inv = tape.chol_solve(v, eye_m)?;
    let s_inv_m = tape.chol_solve(s, m_mat)?;
    let nu_sinv = tape.mul(s_inv, nu);
    let t1 = tape.scale(nu_sinv, -0.5);
    let t2 = tape.mul(s_inv_m, nu);
    let mt_sinv_m = {
        let mt = tape.transpose(m_mat);
        tape.matmul(mt, s_inv_m)
    };
    let nu_q = tape.mul(mt_sinv_m, nu);
    let n_vinv = tape.scale(v_inv, n as f64);
    let t3_sum = tape.add(n_vinv, nu_q);
    let t3 = tape.scale(t3_sum, -0.5);

    let logdet_s = tape.logdet(s)?;
    let mut dsum = {
        let h = tape.scale(nu, 0.5);
        tape.digamma(h)?
    };
    for i in 1..n {
        let shifted = tape.offset(nu, -(i as f64));
        let h = tape.scale(shifted, 0.5);
        let d = tape.digamma(h)?;
        dsum = tape.add(dsum, d);
    }
    let neg_ld = tape.neg(logdet_s);
    let inner = tape.offset(neg_ld, n as f64 * LN_2);
    let with_digamma = tape.add(inner, dsum);
    let t4 = tape.scale(with_digamma, 0.5);

    // logZ = (ν/2)(n log2 - log|S|) + logΓ_n(ν/2) - (n/2)log|V| + (nm/2)log2π
    let half_nu = tape.scale(nu, 0.5);
    let first = tape.mul(half_nu, inner);
    let mut lg = {
        let a = tape.scale(nu, 0.5);
        tape.lgamma(a)?
    };
    for j in 2..=n {
        let a0 = tape.scale(nu, 0.5);
        let a = tape.offset(a0, (1.0 - j as f64) / 2.0);
        let term = tape.lgamma(a)?;
        lg = tape.add(lg, term);
    }
    let lg = tape.offset(lg, (n * (n - 1)) as f64 / 4.0 * std::f64::consts::PI.ln());
    let logdet_v = tape.logdet(v)?;
    let v_term = tape.scale(logdet_v, -(n as f64) / 2.0);
    let p1 = tape.add(first, lg);
    let p2 = tape.add(p1, v_term);
    let log_z = tape.offset(p2, (n * m) as f64 / 2.0 * LN_2PI);

    Ok((MniwMu { t1, t2, t3, t4 }, log_z))
}

/// Dirichlet: natural vector (α-1) -> (E[log π], logZ).
pub fn dirichlet_stats(tape: &mut Tape, eta: VarId) -> Result<(VarId, VarId)> {
    let alpha = tape.offset(eta, 1.0);
    let a0 = tape.sum(alpha);
    let dig = tape.digamma(alpha)?;
    let dig0 = tape.digamma(a0)?;
    let mu = tape.sub(dig, dig0);
    let lg = tape.lgamma(alpha)?;
    let lg_sum = tape.sum(lg);
    let lg0 = tape.lgamma(a0)?;
    let log_z = tape.sub(lg_sum, lg0);
    Ok((mu, log_z))
}

/// Split a packed NIW natural column vector into blocks.
pub fn split_niw_eta(tape: &mut Tape, flat: VarId, n: usize) -> NiwEta {
    let eta1_col = tape.slice(flat, 0, 0, n * n, 1);
    // Row-major packing: reshape column-major of the transpose, i.e. reshape to
    // (n, n) then transpose.
    let eta1_t = tape.reshape(eta1_col, n, n);
    let eta1 = tape.transpose(eta1_t);
    let eta2 = tape.slice(flat, n * n, 0, n, 1);
    let eta3 = tape.slice(flat, n * n + n, 0, 1, 1);
    let eta4 = tape.slice(flat, n * n + n + 1, 0, 1, 1);
    NiwEta {
        eta1,
        eta2,
        eta3,
        eta4,
    }
}

pub fn split_mniw_eta(tape: &mut Tape, flat: VarId, n: usize, m: usize) -> MniwEta {
    let eta1_col = tape.slice(flat, 0, 0, n * n, 1);
    let eta1_t = tape.reshape(eta1_col, n, n);
    let eta1 = tape.transpose(eta1_t);
    let eta2_col = tape.slice(flat, n * n, 0, n * m, 1);
    let eta2_t = tape.reshape(eta2_col, m, n);
    let eta2 = tape.transpose(eta2_t);
    let eta3_col = tape.slice(flat, n * n + n * m, 0, m * m, 1);
    let eta3_t = tape.reshape(eta3_col, m, m);
    let eta3 = tape.transpose(eta3_t);
    let eta4 = tape.slice(flat, n * n + n * m + m * m, 0, 1, 1);
    MniwEta {
        eta1,
        eta2,
        eta3,
        eta4,
    }
}

/// Pack natural blocks back into a row-major flat column (for prior-KL dots).
pub fn pack_niw_eta(tape: &mut Tape, eta: NiwEta) -> VarId {
    let e1t = tape.transpose(eta.eta1);
    let (r, c) = {
        let v = tape.value(e1t);
        (v.nrows(), v.ncols())
    };
    let e1_col = tape.reshape(e1t, r * c, 1);
    tape.concat_rows(&[e1_col, eta.eta2, eta.eta3, eta.eta4])
}

pub fn pack_mniw_eta(tape: &mut Tape, eta: MniwEta) -> VarId {
    let e1t = tape.transpose(eta.eta1);
    let n = tape.value(eta.eta1).nrows();
    let m = tape.value(eta.eta3).nrows();
    let e1_col = tape.reshape(e1t, n * n, 1);
    let e2t = tape.transpose(eta.eta2);
    let e2_col = tape.reshape(e2t, n * m, 1);
    let e3t = tape.transpose(eta.eta3);
    let e3_col = tape.reshape(e3t, m * m, 1);
    tape.concat_rows(&[e1_col, e2_col, e3_col, eta.eta4])
}

/// Pack NIW mean blocks into the same flat order as the natural packing.
pub fn pack_niw_mu(tape: &mut Tape, mu: NiwMu) -> VarId {
    pack_niw_eta(
        tape,
        NiwEta {
            eta1: mu.t1,
            eta2: mu.t2,
            eta3: mu.t3,
            eta4: mu.t4,
        },
    )
}

pub fn pack_mniw_mu(tape: &mut Tape, mu: MniwMu) -> VarId {
    pack_mniw_eta(
        tape,
        MniwEta {
            eta1: mu.t1,
            eta2: mu.t2,
            eta3: mu.t3,
            eta4: mu.t4,
        },
    )
}

/// A fully-wired NIW factor: unconstrained leaf -> η -> (straight-through) μ,
/// logZ, and prior KL against a fixed prior.
pub struct TapedNiwFactor {
    pub unconstrained: VarId,
    pub eta: NiwEta,
    pub mu: NiwMu,
    pub log_z: VarId,
    pub prior_kl: VarId,
}

/// Unconstrained layout for the NIW: [spd(n), m (n, identity), λ (softplus),
/// ν (softplus + shift n-1... shifted by n so ν > n-1 strictly)].
pub fn niw_unconstrained_dim(n: usize) -> usize {
    let spd = Bijector::SpdCorrelationCholesky { n }.unconstrained_dim();
    spd + n + 2
}

pub fn build_niw_factor(
    tape: &mut Tape,
    u: VarId,
    n: usize,
    prior: &crate::expfam::NaturalParams,
    route: ParamRoute,
) -> Result<TapedNiwFactor> {
    let spd_dim = Bijector::SpdCorrelationCholesky { n }.unconstrained_dim();
    let nu_shift = n as f64 - 1.0 + 0.1; // keep ν strictly interior

    let eta = match route {
        ParamRoute::Natural => {
            // canonical via bijector natgrad nodes (blockwise), then the
            // family natgrad node.
            let u_spd = tape.slice(u, 0, 0, spd_dim, 1);
            let s_flat = tape.natgrad_map(
                CustomMap::Bijector(Bijector::SpdCorrelationCholesky { n }),
                u_spd,
            )?;
            let u_m = tape.slice(u, spd_dim, 0, n, 1);
            let u_lam = tape.slice(u, spd_dim + n, 0, 1, 1);
            let lam = tape.natgrad_map(
                CustomMap::Bijector(Bijector::Softplus { dim: 1 }),
                u_lam,
            )?;
            let u_nu = tape.slice(u, spd_dim + n + 1, 0, 1, 1);
            let nu = tape.natgrad_map(
                CustomMap::Bijector(Bijector::ShiftedSoftplus {
                    dim: 1,
                    shift: nu_shift,
                }),
                u_nu,
            )?;
            let canon_flat = tape.concat_rows(&[s_flat, u_m, lam, nu]);
            let eta_flat = tape.natgrad_map(CustomMap::NiwNatural { n }, canon_flat)?;
            split_niw_eta(tape, eta_flat, n)
        }
        ParamRoute::Plain => {
            let u_spd = tape.slice(u, 0, 0, spd_dim, 1);
            let s = taped_spd_forward(tape, u_spd, n);
            let m = tape.slice(u, spd_dim, 0, n, 1);
            let u_lam = tape.slice(u, spd_dim + n, 0, 1, 1);
            let lam = tape.softplus(u_lam);
            let u_nu = tape.slice(u, spd_dim + n + 1, 0, 1, 1);
            let nu0 = tape.softplus(u_nu);
            let nu = tape.offset(nu0, nu_shift);
            // η = [S + λ m mᵀ, λ m, λ, ν + n + 2]
            let mt = tape.transpose(m);
            let mmt = tape.matmul(m, mt);
            let lam_mmt = tape.mul(mmt, lam);
            let eta1 = tape.add(s, lam_mmt);
            let eta2 = tape.mul(m, lam);
            let eta4 = tape.offset(nu, n as f64 + 2.0);
            NiwEta {
                eta1,
                eta2,
                eta3: lam,
                eta4,
            }
        }
    };

    let (mu_raw, log_z) = niw_stats(tape, eta, n)?;
    let mu = match route {
        ParamRoute::Natural => NiwMu {
            t1: tape.straight_through(eta.eta1, mu_raw.t1),
            t2: tape.straight_through(eta.eta2, mu_raw.t2),
            t3: tape.straight_through(eta.eta3, mu_raw.t3),
            t4: tape.straight_through(eta.eta4, mu_raw.t4),
        },
        ParamRoute::Plain => mu_raw,
    };

    // Prior KL = ⟨η - η₀, μ⟩ - logZ(η) + logZ(η₀).
    let eta_flat = pack_niw_eta(tape, eta);
    let mu_flat = pack_niw_mu(tape, mu);
    let eta0 = tape.constant(Mat::from_column_slice(prior.data.len(), 1, &prior.data));
    let diff = tape.sub(eta_flat, eta0);
    let dot = tape.dot(diff, mu_flat);
    let log_z0 = crate::expfam::log_partition(prior)?;
    let d1 = tape.sub(dot, log_z);
    let prior_kl = tape.offset(d1, log_z0);

    Ok(TapedNiwFactor {
        unconstrained: u,
        eta,
        mu,
        log_z,
        prior_kl,
    })
}

pub struct TapedMniwFactor {
    pub unconstrained: VarId,
    pub eta: MniwEta,
    pub mu: MniwMu,
    pub log_z: VarId,
    pub prior_kl: VarId,
}

pub fn mniw_unconstrained_dim(n: usize, m: usize) -> usize {
    let spd_n = Bijector::SpdCorrelationCholesky { n }.unconstrained_dim();
    let spd_m = Bijector::SpdCorrelationCholesky { n: m }.unconstrained_dim();
    spd_n + n * m + spd_m + 1
}

pub fn build_mniw_factor(
    tape: &mut Tape,
    u: VarId,
    n: usize,
    m: usize,
    prior: &crate::expfam::NaturalParams,
    route: ParamRoute,
) -> Result<TapedMniwFactor> {
    let spd_n = Bijector::SpdCorrelationCholesky { n }.unconstrained_dim();
    let spd_m = Bijector::SpdCorrelationCholesky { n: m }.unconstrained_dim();
    let nu_shift = n as f64 - 1.0 + 0.1;

    let eta = match route {
        ParamRoute::Natural => {
            let u_s = tape.slice(u, 0, 0, spd_n, 1);
            let s_flat = tape.natgrad_map(
                CustomMap::Bijector(Bijector::SpdCorrelationCholesky { n }),
                u_s,
            )?;
            let u_m = tape.slice(u, spd_n, 0, n * m, 1);
            let u_v = tape.slice(u, spd_n + n * m, 0, spd_m, 1);
            let v_flat = tape.natgrad_map(
                CustomMap::Bijector(Bijector::SpdCorrelationCholesky { n: m }),
                u_v,
            )?;
            let u_nu = tape.slice(u, spd_n + n * m + spd_m, 0, 1, 1);
            let nu = tape.natgrad_map(
                CustomMap::Bijector(Bijector::ShiftedSoftplus {
                    dim: 1,
                    shift: nu_shift,
                }),
                u_nu,
            )?;
            let canon_flat = tape.concat_rows(&[s_flat, u_m, v_flat, nu]);
            let eta_flat = tape.natgrad_map(CustomMap::MniwNatural { n, m }, canon_flat)?;
            split_mniw_eta(tape, eta_flat, n, m)
        }
        ParamRoute::Plain => {
            let u_s = tape.slice(u, 0, 0, spd_n, 1);
            let s = taped_spd_forward(tape, u_s, n);
            let u_m = tape.slice(u, spd_n, 0, n * m, 1);
            let m_t = tape.reshape(u_m, m, n);
            let m_mat = tape.transpose(m_t); // row-major unconstrained M
            let u_v = tape.slice(u, spd_n + n * m, 0, spd_m, 1);
            let v = taped_spd_forward(tape, u_v, m);
            let u_nu = tape.slice(u, spd_n + n * m + spd_m, 0, 1, 1);
            let nu0 = tape.softplus(u_nu);
            let nu = tape.offset(nu0, nu_shift);
            let mv = tape.matmul(m_mat, v);
            let mt = tape.transpose(m_mat);
            let mvmt = tape.matmul(mv, mt);
            let eta1 = tape.add(s, mvmt);
            let eta4 = tape.offset(nu, (n + m) as f64 + 1.0);
            MniwEta {
                eta1,
                eta2: mv,
                eta3: v,
                eta4,
            }
        }
    };

    let (mu_raw, log_z) = mniw_stats(tape, eta, n, m)?;
    let mu = match route {
        ParamRoute::Natural => MniwMu {
            t1: tape.straight_through(eta.eta1, mu_raw.t1),
            t2: tape.straight_through(eta.eta2, mu_raw.t2),
            t3: tape.straight_through(eta.eta3, mu_raw.t3),
            t4: tape.straight_through(eta.eta4, mu_raw.t4),
        },
        ParamRoute::Plain => mu_raw,
    };

    let eta_flat = pack_mniw_eta(tape, eta);
    let mu_flat = pack_mniw_mu(tape, mu);
    let eta0 = tape.constant(Mat::from_column_slice(prior.data.len(), 1, &prior.data));
    let diff = tape.sub(eta_flat, eta0);
    let dot = tape.dot(diff, mu_flat);
    let log_z0 = crate::expfam::log_partition(prior)?;
    let d1 = tape.sub(dot, log_z);
    let prior_kl = tape.offset(d1, log_z0);

    Ok(TapedMniwFactor {
        unconstrained: u,
        eta,
        mu,
        log_z,
        prior_kl,
    })
}

pub struct TapedDirichletFactor {
    pub unconstrained: VarId,
    pub eta: VarId,
    /// E[log π], straight-through in the Natural route.
    pub mu: VarId,
    pub log_z: VarId,
    pub prior_kl: VarId,
}

/// Dirichlet over K outcomes; unconstrained dim = K (softplus to α > 0).
pub fn build_dirichlet_factor(
    tape: &mut Tape,
    u: VarId,
    k: usize,
    prior: &crate::expfam::NaturalParams,
    route: ParamRoute,
) -> Result<TapedDirichletFactor> {
    let eta = match route {
        ParamRoute::Natural => {
            let alpha = tape.natgrad_map(
                CustomMap::Bijector(Bijector::Softplus { dim: k }),
                u,
            )?;
            tape.natgrad_map(CustomMap::DirichletNatural { k }, alpha)?
        }
        ParamRoute::Plain => {
            let alpha = tape.softplus(u);
            tape.offset(alpha, -1.0)
        }
    };
    let (mu_raw, log_z) = dirichlet_stats(tape, eta)?;
    let mu = match route {
        ParamRoute::Natural => tape.straight_through(eta, mu_raw),
        ParamRoute::Plain => mu_raw,
    };
    let eta0 = tape.constant(Mat::from_column_slice(prior.data.len(), 1, &prior.data));
    let diff = tape.sub(eta, eta0);
    let dot = tape.dot(diff, mu);
    let log_z0 = crate::expfam::log_partition(prior)?;
    let d1 = tape.sub(dot, log_z);
    let prior_kl = tape.offset(d1, log_z0);
    Ok(TapedDirichletFactor {
        unconstrained: u,
        eta,
        mu,
        log_z,
        prior_kl,
    })
}

/// Transition blocks θ̄ (as used by the chain) extracted on tape from MNIW
/// expected statistics, X = [A|b].
#[derive(Debug, Clone, Copy)]
pub struct TapedTransBlocks {
    pub h1: VarId,
    pub j11: VarId,
    pub j12: VarId,
    pub j22: VarId,
    pub h2: VarId,
    /// E[log Z(t(θ))] of the transition factor.
    pub log_norm: VarId,
}

pub fn trans_blocks_from_mniw(
    tape: &mut Tape,
    mu: MniwMu,
    n: usize,
) -> TapedTransBlocks {
    // The t1/t3 blocks are symmetric; read both triangles so cotangents split
    // evenly and the natural-gradient step matches the symmetric update.
    let t1_t = tape.transpose(mu.t1);
    let t1_sym = tape.add(mu.t1, t1_t);
    let j22 = tape.neg(t1_sym);
    let h2 = tape.slice(mu.t2, 0, n, n, 1);
    let qinv_a = tape.slice(mu.t2, 0, 0, n, n);
    let j12 = tape.transpose(qinv_a);
    let j11_block = tape.slice(mu.t3, 0, 0, n, n);
    let j11_block_t = tape.transpose(j11_block);
    let j11_sym = tape.add(j11_block, j11_block_t);
    let j11 = tape.neg(j11_sym);
    let h1_col = tape.slice(mu.t3, 0, n, n, 1);
    let h1_row = tape.slice(mu.t3, n, 0, 1, n);
    let h1_row_t = tape.transpose(h1_row);
    let h1_sum = tape.add(h1_col, h1_row_t);
    let h1 = tape.neg(h1_sum);
    let t3nn = tape.slice(mu.t3, n, n, 1, 1);
    let s = tape.add(t3nn, mu.t4);
    let neg = tape.neg(s);
    let log_norm = tape.offset(neg, n as f64 / 2.0 * LN_2PI);
    TapedTransBlocks {
        h1,
        j11,
        j12,
        j22,
        h2,
        log_norm,
    }
}

/// Initial-state blocks (h0, J0, E[logZ]) from NIW expected statistics.
#[derive(Debug, Clone, Copy)]
pub struct TapedInitBlocks {
    pub h0: VarId,
    pub j0: VarId,
    pub log_norm: VarId,
}

pub fn init_blocks_from_niw(tape: &mut Tape, mu: NiwMu, n: usize) -> TapedInitBlocks {
    let j0 = tape.scale(mu.t1, -2.0);
    let h0 = mu.t2;
    let s = tape.add(mu.t3, mu.t4);
    let neg = tape.neg(s);
    let log_norm = tape.offset(neg, n as f64 / 2.0 * LN_2PI);
    TapedInitBlocks { h0, j0, log_norm }
}

/// Helpers for tests: evaluate a factor graph's μ/logZ values from packed
/// natural parameters.
pub fn eval_niw_stats_from_values(eta: &crate::expfam::NaturalParams) -> Result<(Vec<f64>, f64)> {
    let n = match eta.family {
        crate::expfam::Family::Niw { n } => n,
        _ => panic!("not NIW"),
    };
    let mut tape = Tape::new();
    let flat = tape.leaf(DMatrix::from_column_slice(eta.data.len(), 1, &eta.data));
    let blocks = split_niw_eta(&mut tape, flat, n);
    let (mu, log_z) = niw_stats(&mut tape, blocks, n)?;
    let flat_mu = pack_niw_mu(&mut tape, mu);
    Ok((
        tape.value(flat_mu).as_slice().to_vec(),
        tape.scalar(log_z),
    ))
}

pub fn eval_mniw_stats_from_values(eta: &crate::expfam::NaturalParams) -> Result<(Vec<f64>, f64)> {
    let (n, m) = match eta.family {
        crate::expfam::Family::Mniw { n, m } => (n, m),
        _ => panic!("not MNIW"),
    };
    let mut tape = Tape::new();
    let flat = tape.leaf(DMatrix::from_column_slice(eta.data.len(), 1, &eta.data));
    let blocks = split_mniw_eta(&mut tape, flat, n, m);
    let (mu, log_z) = mniw_stats(&mut tape, blocks, n, m)?;
    let flat_mu = pack_mniw_mu(&mut tape, mu);
    Ok((
        tape.value(flat_mu).as_slice().to_vec(),
        tape.scalar(log_z),
    ))
}
