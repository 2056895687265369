//! Gradient estimators for the inner (structured mean-field) optimization:
//! unrolled backprop through the recorded sweeps, implicit gradients at the
//! endpoint via Richardson/Neumann iteration (with uncapped, capped, and
//! thresholded policies), and assembly of the natural-gradient direction.
//!
//! The implicit path never materializes ∂g/∂ω: the Neumann recursion applies
//! (I - ∂g/∂ω)ᵀ by re-running reverse mode over the residual graph at the
//! endpoint, then one extra VJP contracts through ∂g/∂η and ∂g/∂λ.

use nalgebra::DMatrix;

use crate::diff::chain::{filter_smooth, TapedChain, TapedChainResult};
use crate::diff::hmm::{forward_backward as taped_fb, TapedHmm, TapedHmmResult};
use crate::diff::loss;
use crate::diff::meanfield::{build_g_residual, mf_to_continuous, mf_to_discrete, GResidualGraph, TapedGlobals};
use crate::diff::tape::{Tape, VarId};
use crate::error::{Result, SvaeError};
use crate::linalg::{Mat, Vec64};
use crate::meanfield::{block_update, BlockUpdateConfig, GlobalExpectedStats};

/// Which estimator computes ∂ω/∂η-type terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradMode {
    /// Differentiate the recorded block-update sweeps end to end.
    Unrolled,
    /// Richardson with a fixed iteration count J.
    ImplicitFixedJ(usize),
    /// Richardson with J equal to the number of forward sweeps.
    ImplicitCapped,
    /// Capped, but if the endpoint residual exceeds the tolerance, fall back
    /// to the No-Solve answer.
    ImplicitCappedThreshold { residual_tol: f64 },
    /// Replace the linear solve with identity (Richardson J = 0).
    NoSolve,
}

/// Default residual tolerance for the thresholded mode.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-6;

/// Richardson/Neumann solve of (∂g/∂ω)⁻ᵀ·rhs via repeated residual VJPs:
/// S_{j+1} = rhs + S_j - (∂g/∂ω)ᵀ S_j. With `iters` = 0 this returns `rhs`
/// (the No-Solve answer). Aborts with `NonFinite` if an iterate's norm exceeds
/// 1e6 times the rhs norm or stops being finite.
pub fn richardson_solve(
    tape: &Tape,
    graph: &GResidualGraph,
    rhs: &[f64],
    iters: usize,
) -> Result<Vec<f64>> {
    let n = graph.dim();
    assert_eq!(rhs.len(), n, "rhs length");
    let rhs_norm = rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut s = rhs.to_vec();
    for j in 0..iters {
        let seed = DMatrix::from_column_slice(n, 1, &s);
        let grads = tape.vjp(graph.residual, seed)?;
        let jt_s = graph.gather(&grads);
        for i in 0..n {
            s[i] = rhs[i] + s[i] - jt_s[i];
        }
        let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e6 * rhs_norm.max(1e-300) {
            return Err(SvaeError::NonFinite {
                context: "richardson_solve",
                iter: j + 1,
            });
        }
    }
    Ok(s)
}

/// Scalar-system Richardson used by unit tests: solves aᵀ... for g'(ω) = a,
/// computes Σ_{j=0}^{J} (1-a)^j · rhs.
pub fn richardson_scalar(a: f64, rhs: f64, iters: usize) -> Result<f64> {
    let mut s = rhs;
    for j in 0..iters {
        s = rhs + s - a * s;
        if !s.is_finite() || s.abs() > 1e6 * rhs.abs().max(1e-300) {
            return Err(SvaeError::NonFinite {
                context: "richardson_scalar",
                iter: j + 1,
            });
        }
    }
    Ok(s)
}

/// Result of an inner-gradient estimation run. The tape and leaf handles are
/// kept so callers can read gradients for any input.
pub struct InnerGradients {
    pub tape: Tape,
    pub globals: TapedGlobals,
    pub recog: Vec<(VarId, VarId)>,
    /// Accumulated gradients per node (loss direct part minus the implicit
    /// correction), or the unrolled gradient.
    pub grads: Vec<Option<Mat>>,
    /// The objective value at the endpoint.
    pub value: f64,
    /// Forward sweeps taken by the block update.
    pub forward_sweeps: usize,
    /// Endpoint residual ∞-norm.
    pub residual: f64,
    /// Instrumentation: number of BP states stored for the backward pass
    /// (Θ(L) for unrolled, 1 for implicit modes).
    pub stored_states: usize,
    /// Richardson iterations actually run.
    pub richardson_iters: usize,
}

impl InnerGradients {
    pub fn grad(&self, id: VarId) -> Mat {
        let v = self.tape.value(id);
        crate::diff::tape::grad_or_zero(&self.grads, id, v.nrows(), v.ncols())
    }
}

/// Estimate gradients of the surrogate-local objective with respect to the
/// digested global statistics and the recognition potentials, using the
/// selected mode. Runs the plain block update first; implicit modes then build
/// one endpoint graph, unrolled mode re-tapes every sweep.
pub fn surrogate_gradients(
    g: &GlobalExpectedStats,
    recog_vals: &[(Vec64, Mat)],
    cfg: &BlockUpdateConfig,
    mode: GradMode,
) -> Result<InnerGradients> {
    let st = block_update(g, recog_vals, cfg, None)?;
    let sweeps = st.iters;

    match mode {
        GradMode::Unrolled => {
            let mut tape = Tape::new();
            let globals = TapedGlobals::leaves_from(&mut tape, g);
            let recog: Vec<(VarId, VarId)> = recog_vals
                .iter()
                .map(|(r, rr)| (tape.leaf_vec(r), tape.leaf(rr.clone())))
                .collect();
            let k = g.n_states();
            let t_len = recog_vals.len();
            let uniform = tape.constant(DMatrix::from_element(k, 1, 1.0 / k as f64));
            let mut q: Vec<VarId> = vec![uniform; t_len - 1];
            let mut state: Option<(TapedChain, TapedChainResult, TapedHmm, TapedHmmResult)> = None;
            for _ in 0..sweeps {
                let chain = mf_to_continuous(&mut tape, &globals, &q, &recog);
                let chain_res = filter_smooth(&mut tape, &chain)?;
                let hmm = mf_to_discrete(&mut tape, &globals, &chain_res);
                let hmm_res = taped_fb(&mut tape, &hmm)?;
                q = hmm_res.marginal.clone();
                state = Some((chain, chain_res, hmm, hmm_res));
            }
            let (chain, chain_res, hmm, hmm_res) = state.expect("at least one sweep");
            let value = loss::surrogate_local(
                &mut tape, &globals, &recog, &chain, &chain_res, &hmm, &hmm_res,
            );
            let value_num = tape.scalar(value);
            let grads = tape.vjp(value, DMatrix::from_element(1, 1, 1.0))?;
            Ok(InnerGradients {
                tape,
                globals,
                recog,
                grads,
                value: value_num,
                forward_sweeps: sweeps,
                residual: st.residual,
                stored_states: sweeps,
                richardson_iters: 0,
            })
        }
        _ => {
            let mut tape = Tape::new();
            let globals = TapedGlobals::leaves_from(&mut tape, g);
            let recog: Vec<(VarId, VarId)> = recog_vals
                .iter()
                .map(|(r, rr)| (tape.leaf_vec(r), tape.leaf(rr.clone())))
                .collect();
            let graph = build_g_residual(&mut tape, &globals, &recog, &st.omega_z, &st.omega_k)?;
            // Loss on the reapplied state (identical to the endpoint at a
            // fixed point).
            let chain_res = filter_smooth(&mut tape, &graph.new_chain)?;
            let hmm_res = taped_fb(&mut tape, &graph.new_hmm)?;
            let value = loss::surrogate_local(
                &mut tape,
                &globals,
                &recog,
                &graph.new_chain,
                &chain_res,
                &graph.new_hmm,
                &hmm_res,
            );
            let value_num = tape.scalar(value);

            // Pass A: direct gradients + cotangent at the ω leaves.
            let grads_a = tape.vjp(value, DMatrix::from_element(1, 1, 1.0))?;
            let u = graph.gather(&grads_a);

            // Pick J.
            let iters = match mode {
                GradMode::NoSolve => 0,
                GradMode::ImplicitFixedJ(j) => j,
                GradMode::ImplicitCapped => sweeps,
                GradMode::ImplicitCappedThreshold { residual_tol } => {
                    if st.residual > residual_tol {
                        0
                    } else {
                        sweeps
                    }
                }
                GradMode::Unrolled => unreachable!(),
            };
            let w = richardson_solve(&tape, &graph, &u, iters)?;

            // Pass B: contract -wᵀ ∂g/∂(η, λ).
            let n = graph.dim();
            let seed = DMatrix::from_column_slice(n, 1, &w);
            let grads_b = tape.vjp(graph.residual, seed)?;

            // total = A - B at every node (ω-leaf entries are meaningless and
            // unused by callers).
            let mut grads = grads_a;
            for (slot, b) in grads.iter_mut().zip(grads_b.into_iter()) {
                if let Some(bm) = b {
                    match slot {
                        Some(am) => *am -= &bm,
                        None => *slot = Some(-bm),
                    }
                }
            }

            Ok(InnerGradients {
                tape,
                globals,
                recog,
                grads,
                value: value_num,
                forward_sweeps: sweeps,
                residual: st.residual,
                stored_states: 1,
                richardson_iters: iters,
            })
        }
    }
}

/// Natural-gradient direction for a fully conjugate LDS (K = 1, no decoder):
/// the surrogate-loss graph is built over explicit natural-parameter leaves
/// with straight-through on the η → μ maps (identity bijectors), so one VJP
/// yields the direction whose unit step is the exact coordinate-ascent update.
pub struct ConjugateLdsDirection {
    pub niw: Vec<f64>,
    pub mniw: Vec<f64>,
    pub surrogate: f64,
}

pub fn conjugate_lds_natural_direction(
    niw_eta: &crate::expfam::NaturalParams,
    mniw_eta: &crate::expfam::NaturalParams,
    niw_prior: &crate::expfam::NaturalParams,
    mniw_prior: &crate::expfam::NaturalParams,
    recog_vals: &[(Vec64, Mat)],
) -> Result<ConjugateLdsDirection> {
    let n = match niw_eta.family {
        crate::expfam::Family::Niw { n } => n,
        _ => return Err(SvaeError::FamilyMismatch("init factor must be NIW".into())),
    };
    let mut tape = Tape::new();
    let niw_leaf = tape.leaf(DMatrix::from_column_slice(niw_eta.data.len(), 1, &niw_eta.data));
    let mniw_leaf = tape.leaf(DMatrix::from_column_slice(
        mniw_eta.data.len(),
        1,
        &mniw_eta.data,
    ));

    // η -> μ with straight-through; logZ(η) for the prior KL.
    let niw_blocks = crate::diff::expfam::split_niw_eta(&mut tape, niw_leaf, n);
    let (niw_mu_raw, niw_logz) = crate::diff::expfam::niw_stats(&mut tape, niw_blocks, n)?;
    let niw_mu = crate::diff::expfam::NiwMu {
        t1: tape.straight_through(niw_blocks.eta1, niw_mu_raw.t1),
        t2: tape.straight_through(niw_blocks.eta2, niw_mu_raw.t2),
        t3: tape.straight_through(niw_blocks.eta3, niw_mu_raw.t3),
        t4: tape.straight_through(niw_blocks.eta4, niw_mu_raw.t4),
    };
    let mniw_blocks = crate::diff::expfam::split_mniw_eta(&mut tape, mniw_leaf, n, n + 1);
    let (mniw_mu_raw, mniw_logz) =
        crate::diff::expfam::mniw_stats(&mut tape, mniw_blocks, n, n + 1)?;
    let mniw_mu = crate::diff::expfam::MniwMu {
        t1: tape.straight_through(mniw_blocks.eta1, mniw_mu_raw.t1),
        t2: tape.straight_through(mniw_blocks.eta2, mniw_mu_raw.t2),
        t3: tape.straight_through(mniw_blocks.eta3, mniw_mu_raw.t3),
        t4: tape.straight_through(mniw_blocks.eta4, mniw_mu_raw.t4),
    };

    // Prior KLs: ⟨η - η₀, μ⟩ - logZ(η) + logZ(η₀).
    let kl_of = |tape: &mut Tape, eta_flat: VarId, mu_flat: VarId, logz: VarId, prior: &crate::expfam::NaturalParams| -> Result<VarId> {
        let eta0 = tape.constant(DMatrix::from_column_slice(prior.data.len(), 1, &prior.data));
        let diff = tape.sub(eta_flat, eta0);
        let dot = tape.dot(diff, mu_flat);
        let lz0 = crate::expfam::log_partition(prior)?;
        let d1 = tape.sub(dot, logz);
        Ok(tape.offset(d1, lz0))
    };
    let niw_mu_flat = crate::diff::expfam::pack_niw_mu(&mut tape, niw_mu);
    let mniw_mu_flat = crate::diff::expfam::pack_mniw_mu(&mut tape, mniw_mu);
    let kl_niw = kl_of(&mut tape, niw_leaf, niw_mu_flat, niw_logz, niw_prior)?;
    let kl_mniw = kl_of(&mut tape, mniw_leaf, mniw_mu_flat, mniw_logz, mniw_prior)?;
    let prior_kl = tape.add(kl_niw, kl_mniw);

    // Digested blocks and the (exact, K=1) chain.
    let init = crate::diff::expfam::init_blocks_from_niw(&mut tape, niw_mu, n);
    let trans = crate::diff::expfam::trans_blocks_from_mniw(&mut tape, mniw_mu, n);
    let globals = TapedGlobals {
        d: n,
        k: 1,
        init,
        trans: vec![trans],
        log_pi0: tape.constant(DMatrix::zeros(1, 1)),
        log_pi: tape.constant(DMatrix::zeros(1, 1)),
    };
    let recog: Vec<(VarId, VarId)> = recog_vals
        .iter()
        .map(|(r, rr)| (tape.constant_vec(r), tape.constant(rr.clone())))
        .collect();
    let ones: Vec<VarId> = (0..recog_vals.len() - 1)
        .map(|_| tape.constant(DMatrix::from_element(1, 1, 1.0)))
        .collect();
    let chain = mf_to_continuous(&mut tape, &globals, &ones, &recog);
    let chain_res = filter_smooth(&mut tape, &chain)?;

    // Surrogate = -(priorKL + localKL - ⟨λ, μ⟩) = -priorKL + logZ(ω) - ElogZ.
    let kl_z = loss::local_kl_continuous(&mut tape, &globals, &recog, &chain_res, &ones);
    let recog_dot = loss::recog_dot_stats(&mut tape, &recog, &chain_res);
    let surrogate = loss::objective_from_parts(&mut tape, Some(prior_kl), kl_z, None, recog_dot);

    let value = tape.scalar(surrogate);
    let grads = tape.vjp(surrogate, DMatrix::from_element(1, 1, 1.0))?;
    let g_niw = crate::diff::tape::grad_of(&grads, niw_leaf);
    let g_mniw = crate::diff::tape::grad_of(&grads, mniw_leaf);
    Ok(ConjugateLdsDirection {
        niw: g_niw.as_slice().to_vec(),
        mniw: g_mniw.as_slice().to_vec(),
        surrogate: value,
    })
}
