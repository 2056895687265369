//! Taped mean-field machinery: the MF message maps, the digested global
//! blocks, and the fixed-point residual graph g(ω) = ω - MF(BP(ω)) whose VJPs
//! drive the implicit gradient estimators.

use nalgebra::DMatrix;

use crate::chain::ChainPotentials;
use crate::error::Result;
use crate::hmm::HmmPotentials;
use crate::meanfield::GlobalExpectedStats;

use super::chain::{TapedChain, TapedChainResult, TapedTransition};
use super::expfam::{TapedInitBlocks, TapedTransBlocks};
use super::hmm::TapedHmm;
use super::tape::{Tape, VarId};

/// Digested global expected statistics as tape variables.
#[derive(Debug, Clone)]
pub struct TapedGlobals {
    pub d: usize,
    pub k: usize,
    pub init: TapedInitBlocks,
    pub trans: Vec<TapedTransBlocks>,
    pub log_pi0: VarId,
    pub log_pi: VarId,
}

impl TapedGlobals {
    /// Load plain digested globals as leaves (used by standalone gradient
    /// estimation against the expected-statistics inputs).
    pub fn leaves_from(tape: &mut Tape, g: &GlobalExpectedStats) -> Self {
        let d = g.dim();
        let k = g.n_states();
        let init = TapedInitBlocks {
            h0: tape.leaf_vec(&g.init_h),
            j0: tape.leaf(g.init_j.clone()),
            log_norm: tape.leaf_scalar(g.init_log_norm),
        };
        let trans = (0..k)
            .map(|j| TapedTransBlocks {
                h1: tape.leaf_vec(&g.trans[j].h1),
                j11: tape.leaf(g.trans[j].j11.clone()),
                j12: tape.leaf(g.trans[j].j12.clone()),
                j22: tape.leaf(g.trans[j].j22.clone()),
                h2: tape.leaf_vec(&g.trans[j].h2),
                log_norm: tape.leaf_scalar(g.trans_log_norm[j]),
            })
            .collect();
        let log_pi0 = tape.leaf(DMatrix::from_fn(k, 1, |i, _| g.log_pi0[i]));
        let log_pi = tape.leaf(g.log_pi.clone());
        TapedGlobals {
            d,
            k,
            init,
            trans,
            log_pi0,
            log_pi,
        }
    }

    /// Load plain digested globals as constants (no gradients tracked).
    pub fn constants_from(tape: &mut Tape, g: &GlobalExpectedStats) -> Self {
        let d = g.dim();
        let k = g.n_states();
        let init = TapedInitBlocks {
            h0: tape.constant_vec(&g.init_h),
            j0: tape.constant(g.init_j.clone()),
            log_norm: tape.constant_scalar(g.init_log_norm),
        };
        let trans = (0..k)
            .map(|j| TapedTransBlocks {
                h1: tape.constant_vec(&g.trans[j].h1),
                j11: tape.constant(g.trans[j].j11.clone()),
                j12: tape.constant(g.trans[j].j12.clone()),
                j22: tape.constant(g.trans[j].j22.clone()),
                h2: tape.constant_vec(&g.trans[j].h2),
                log_norm: tape.constant_scalar(g.trans_log_norm[j]),
            })
            .collect();
        let log_pi0 = tape.constant(DMatrix::from_fn(k, 1, |i, _| g.log_pi0[i]));
        let log_pi = tape.constant(g.log_pi.clone());
        TapedGlobals {
            d,
            k,
            init,
            trans,
            log_pi0,
            log_pi,
        }
    }

    /// Every leaf id, in a stable order (for gradient gathering).
    pub fn leaf_ids(&self) -> Vec<VarId> {
        let mut ids = vec![self.init.h0, self.init.j0, self.init.log_norm];
        for t in &self.trans {
            ids.extend_from_slice(&[t.h1, t.j11, t.j12, t.j22, t.h2, t.log_norm]);
        }
        ids.push(self.log_pi0);
        ids.push(self.log_pi);
        ids
    }
}

/// Continuous-block MF map on tape: transition t is Σ_j q(k_t = j)·θ̄_j.
pub fn mf_to_continuous(
    tape: &mut Tape,
    g: &TapedGlobals,
    q_k: &[VarId],
    recog: &[(VarId, VarId)],
) -> TapedChain {
    let mut trans = Vec::with_capacity(q_k.len());
    for q in q_k {
        let mut h1 = None;
        let mut j11 = None;
        let mut j12 = None;
        let mut j22 = None;
        let mut h2 = None;
        let add_to = |tape: &mut Tape, acc: &mut Option<VarId>, term: VarId| {
            *acc = Some(match *acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        };
        for (j, blk) in g.trans.iter().enumerate() {
            let w = tape.slice(*q, j, 0, 1, 1);
            let t1 = tape.mul(blk.h1, w);
            add_to(tape, &mut h1, t1);
            let t2 = tape.mul(blk.j11, w);
            add_to(tape, &mut j11, t2);
            let t3 = tape.mul(blk.j12, w);
            add_to(tape, &mut j12, t3);
            let t4 = tape.mul(blk.j22, w);
            add_to(tape, &mut j22, t4);
            let t5 = tape.mul(blk.h2, w);
            add_to(tape, &mut h2, t5);
        }
        trans.push(TapedTransition {
            h1: h1.unwrap(),
            j11: j11.unwrap(),
            j12: j12.unwrap(),
            j22: j22.unwrap(),
            h2: h2.unwrap(),
        });
    }
    TapedChain {
        d: g.d,
        init_h: g.init.h0,
        init_j: g.init.j0,
        trans,
        recog: recog.to_vec(),
    }
}

/// ⟨θ̄, E[t(z_t, z_{t+1})]⟩ on tape, from the five blocks.
pub fn pair_score_blocks(
    tape: &mut Tape,
    h1: VarId,
    j11: VarId,
    j12: VarId,
    j22: VarId,
    h2: VarId,
    res: &TapedChainResult,
    t: usize,
) -> VarId {
    let a = tape.dot(h1, res.mean[t]);
    let b = tape.dot(j11, res.second[t]);
    let c = tape.dot(j12, res.cross[t]);
    let d = tape.dot(j22, res.second[t + 1]);
    let e = tape.dot(h2, res.mean[t + 1]);
    let nb = tape.scale(b, -0.5);
    let nd = tape.scale(d, -0.5);
    let na = tape.neg(a);
    let s1 = tape.add(na, nb);
    let s2 = tape.add(s1, c);
    let s3 = tape.add(s2, nd);
    tape.add(s3, e)
}

/// ⟨θ̄, E[t(z_t, z_{t+1})]⟩ on tape.
pub fn pair_score(
    tape: &mut Tape,
    blk: &TapedTransBlocks,
    res: &TapedChainResult,
    t: usize,
) -> VarId {
    pair_score_blocks(tape, blk.h1, blk.j11, blk.j12, blk.j22, blk.h2, res, t)
}

/// Discrete-block MF map on tape: obs_t(k) = ⟨θ̄_k, E t⟩ - E[logZ(θ_k)].
pub fn mf_to_discrete(tape: &mut Tape, g: &TapedGlobals, res: &TapedChainResult) -> TapedHmm {
    let t_len = res.mean.len();
    let mut obs = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let mut entries = Vec::with_capacity(g.k);
        for blk in &g.trans {
            let s = pair_score(tape, blk, res, t);
            entries.push(tape.sub(s, blk.log_norm));
        }
        obs.push(tape.concat_rows(&entries));
    }
    TapedHmm {
        k: g.k,
        log_pi0: g.log_pi0,
        log_pi: g.log_pi,
        obs,
    }
}

/// Flatten a chain-transition tape block row-major, matching
/// [`crate::meanfield::flatten_omega`].
fn flatten_transition(tape: &mut Tape, tr: &TapedTransition, d: usize) -> Vec<VarId> {
    let j11_t = tape.transpose(tr.j11);
    let j11 = tape.reshape(j11_t, d * d, 1);
    let j12_t = tape.transpose(tr.j12);
    let j12 = tape.reshape(j12_t, d * d, 1);
    let j22_t = tape.transpose(tr.j22);
    let j22 = tape.reshape(j22_t, d * d, 1);
    vec![tr.h1, j11, j12, j22, tr.h2]
}

/// The fixed-point residual graph, exposing its intermediates so a loss can be
/// built on top of the same tape (sharing the ω leaves and MF outputs).
pub struct GResidualGraph {
    /// ω-side chain (transition blocks are the ω leaves).
    pub omega_chain: TapedChain,
    /// ω-side discrete potentials (obs rows are the ω leaves).
    pub omega_obs: Vec<VarId>,
    /// BP(ω̂_z): expected statistics of the ω-side chain.
    pub bp_chain: TapedChainResult,
    /// BP(ω̂_k): marginals of the ω-side discrete chain.
    pub bp_hmm: super::hmm::TapedHmmResult,
    /// MF(BP(ω̂_k)): the reapplied continuous block.
    pub new_chain: TapedChain,
    /// MF(BP(ω̂_z)): the reapplied discrete block.
    pub new_hmm: TapedHmm,
    /// Flat residual, length (T-1)(3D²+2D) + (T-1)K.
    pub residual: VarId,
    /// The ω leaves in flatten order, as (id, rows, cols).
    pub omega_leaves: Vec<(VarId, usize, usize)>,
}

/// Build g(ω) = ω - MF(BP(ω)) with Jacobi (parallel) block structure on the
/// given tape. `globals` and `recog` may be leaves or interior nodes; the ω
/// transition/obs values become fresh leaves.
pub fn build_g_residual(
    tape: &mut Tape,
    globals: &TapedGlobals,
    recog: &[(VarId, VarId)],
    omega_z: &ChainPotentials,
    omega_k: &HmmPotentials,
) -> Result<GResidualGraph> {
    let d = globals.d;
    let k = globals.k;
    let t_len = recog.len();

    // ω leaves.
    let trans: Vec<TapedTransition> = omega_z
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
    let obs: Vec<VarId> = omega_k
        .obs
        .iter()
        .map(|row| tape.leaf(DMatrix::from_fn(k, 1, |i, _| row[i])))
        .collect();

    let omega_chain = TapedChain {
        d,
        init_h: globals.init.h0,
        init_j: globals.init.j0,
        trans: trans.clone(),
        recog: recog.to_vec(),
    };
    let omega_hmm = TapedHmm {
        k,
        log_pi0: globals.log_pi0,
        log_pi: globals.log_pi,
        obs: obs.clone(),
    };

    // BP on both blocks (Jacobi), then MF.
    let chain_res = super::chain::filter_smooth(tape, &omega_chain)?;
    let hmm_res = super::hmm::forward_backward(tape, &omega_hmm)?;
    let new_chain = mf_to_continuous(tape, globals, &hmm_res.marginal, recog);
    let new_hmm = mf_to_discrete(tape, globals, &chain_res);

    // Residual = flat(ω) - flat(MF(BP(ω))).
    let mut cur_parts: Vec<VarId> = Vec::new();
    let mut new_parts: Vec<VarId> = Vec::new();
    let mut omega_leaves: Vec<(VarId, usize, usize)> = Vec::new();
    for (tr_leaf, tr_new) in trans.iter().zip(&new_chain.trans) {
        cur_parts.extend(flatten_transition(tape, tr_leaf, d));
        new_parts.extend(flatten_transition(tape, tr_new, d));
    }
    for (o_leaf, o_new) in obs.iter().zip(&new_hmm.obs) {
        cur_parts.push(*o_leaf);
        new_parts.push(*o_new);
    }
    // Leaf bookkeeping in the same flat order.
    for tr_leaf in &trans {
        omega_leaves.push((tr_leaf.h1, d, 1));
        omega_leaves.push((tr_leaf.j11, d, d));
        omega_leaves.push((tr_leaf.j12, d, d));
        omega_leaves.push((tr_leaf.j22, d, d));
        omega_leaves.push((tr_leaf.h2, d, 1));
    }
    for o in &obs {
        omega_leaves.push((*o, k, 1));
    }

    let cur = tape.concat_rows(&cur_parts);
    let new = tape.concat_rows(&new_parts);
    let residual = tape.sub(cur, new);
    let _ = t_len;

    Ok(GResidualGraph {
        omega_chain,
        omega_obs: obs,
        bp_chain: chain_res,
        bp_hmm: hmm_res,
        new_chain,
        new_hmm,
        residual,
        omega_leaves,
    })
}

impl GResidualGraph {
    /// Total flat dimension of ω.
    pub fn dim(&self) -> usize {
        self.omega_leaves.iter().map(|(_, r, c)| r * c).sum()
    }

    /// Gather per-leaf cotangents (from a vjp result) into the flat ω order.
    /// Matrix blocks are flattened row-major, matching the residual layout.
    pub fn gather(&self, grads: &[Option<DMatrix<f64>>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (id, r, c) in &self.omega_leaves {
            match &grads[id.0] {
                Some(g) => {
                    for i in 0..*r {
                        for j in 0..*c {
                            out.push(g[(i, j)]);
                        }
                    }
                }
                None => out.extend(std::iter::repeat(0.0).take(r * c)),
            }
        }
        out
    }

    /// Split a flat ω-space vector back into per-leaf seed matrices.
    pub fn scatter(&self, flat: &[f64]) -> Vec<(VarId, DMatrix<f64>)> {
        let mut out = Vec::with_capacity(self.omega_leaves.len());
        let mut at = 0;
        for (id, r, c) in &self.omega_leaves {
            let m = DMatrix::from_row_slice(*r, *c, &flat[at..at + r * c]);
            at += r * c;
            out.push((*id, m));
        }
        out
    }
}
