//! Structured mean-field coupling between the Gaussian chain and the discrete
//! chain: the two MF message maps, block coordinate ascent, and the fixed-point
//! residual used by implicit differentiation.
//!
//! The continuous block sees each transition as a q(k_t)-weighted convex
//! combination of the per-state expected transition blocks; the discrete block
//! sees per-step potentials ⟨θ̄_k, E[t(z_{t-1}, z_t)]⟩ minus the expected
//! transition log-normalizer.

use rayon::ThreadPool;

use crate::chain::{self, ChainPotentials, TransitionPotential};
use crate::error::{Result, SvaeError};
use crate::expfam::{Family, MeanParams};
use crate::hmm::{self, HmmMarginals, HmmPotentials};
use crate::linalg::{self, Mat, Vec64};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Expected global statistics digested into the blocks the local chains need.
#[derive(Debug, Clone)]
pub struct GlobalExpectedStats {
    /// Initial-state factor: E[Σ₀⁻¹μ₀] and E[Σ₀⁻¹].
    pub init_h: Vec64,
    pub init_j: Mat,
    /// Expected log-normalizer of the initial factor, E[log Z(t(θ_init))].
    pub init_log_norm: f64,
    /// Per-state expected transition blocks θ̄_k.
    pub trans: Vec<TransitionPotential>,
    /// Per-state expected transition log-normalizer E[log Z(t(θ_k))].
    pub trans_log_norm: Vec<f64>,
    /// E[log π₀] and E[log π].
    pub log_pi0: Vec<f64>,
    pub log_pi: Mat,
}

impl GlobalExpectedStats {
    pub fn n_states(&self) -> usize {
        self.trans.len()
    }

    pub fn dim(&self) -> usize {
        self.init_h.len()
    }

    /// Digest NIW expected statistics into the initial-state blocks.
    ///
    /// The NIW statistics are (-½Σ⁻¹, Σ⁻¹μ, -½μᵀΣ⁻¹μ, -½log|Σ|); the first two
    /// are the factor parameters and the last two assemble the expected
    /// normalizer E[logZ] = -E[t₃] - E[t₄] + (D/2)·log 2π.
    pub fn init_from_niw_stats(mu: &MeanParams) -> Result<(Vec64, Mat, f64)> {
        let n = match mu.family {
            Family::Niw { n } => n,
            f => return Err(SvaeError::FamilyMismatch(format!("expected NIW, got {f:?}"))),
        };
        let j = crate::expfam::block_mat(&mu.data, 0, n, n) * -2.0;
        let h = crate::expfam::block_vec(&mu.data, n * n, n);
        let log_norm =
            -mu.data[n * n + n] - mu.data[n * n + n + 1] + n as f64 / 2.0 * LN_2PI;
        Ok((h, j, log_norm))
    }

    /// Digest MNIW expected statistics (X = [A|b], so m = n+1 columns) into the
    /// five transition blocks and the expected log-normalizer.
    pub fn trans_from_mniw_stats(mu: &MeanParams) -> Result<(TransitionPotential, f64)> {
        let (n, m) = match mu.family {
            Family::Mniw { n, m } => (n, m),
            f => {
                return Err(SvaeError::FamilyMismatch(format!(
                    "expected MNIW, got {f:?}"
                )))
            }
        };
        if m != n + 1 {
            return Err(SvaeError::DimMismatch(format!(
                "transition MNIW needs m = n+1, got n={n}, m={m}"
            )));
        }
        let t1 = crate::expfam::block_mat(&mu.data, 0, n, n); // E[-½Q⁻¹]
        let t2 = crate::expfam::block_mat(&mu.data, n * n, n, m); // E[Q⁻¹X]
        let t3 = crate::expfam::block_mat(&mu.data, n * n + n * m, m, m); // E[-½XᵀQ⁻¹X]
        let t4 = mu.data[n * n + n * m + m * m]; // E[-½log|Q|]

        let j22 = &t1 * -2.0;
        let h2 = Vec64::from(t2.column(n));
        let j12 = Mat::from(t2.columns(0, n)).transpose(); // E[AᵀQ⁻¹]
        let j11 = Mat::from(t3.view((0, 0), (n, n))) * -2.0;
        let h1 = Vec64::from_iterator(n, (0..n).map(|i| t3[(i, n)] * -2.0));
        let log_norm = -t3[(n, n)] - t4 + n as f64 / 2.0 * LN_2PI;
        Ok((
            TransitionPotential {
                h1,
                j11,
                j12,
                j22,
                h2,
            },
            log_norm,
        ))
    }

    /// Point-mass globals from fixed canonical parameters (A, b, Q per state,
    /// μ0/Σ0, π0/π). Used by conjugate sanity models and tests.
    #[allow(clippy::too_many_arguments)]
    pub fn from_point_estimate(
        a: &[Mat],
        b: &[Vec64],
        q: &[Mat],
        mu0: &Vec64,
        sigma0: &Mat,
        pi0: &[f64],
        pi: &Mat,
    ) -> Result<Self> {
        let d = mu0.len();
        let k = a.len();
        if b.len() != k || q.len() != k {
            return Err(SvaeError::DimMismatch("per-state parameter counts".into()));
        }
        let chol0 = linalg::chol(sigma0, "point estimate Sigma0")?;
        let j0 = chol0.inverse();
        let h0 = &j0 * mu0;
        let logdet0 = 2.0 * chol0.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let init_log_norm = 0.5 * mu0.dot(&h0) + 0.5 * logdet0 + d as f64 / 2.0 * LN_2PI;

        let mut trans = Vec::with_capacity(k);
        let mut trans_log_norm = Vec::with_capacity(k);
        for s in 0..k {
            let chol = linalg::chol(&q[s], "point estimate Q")?;
            let qinv = chol.inverse();
            let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            trans.push(TransitionPotential {
                h1: a[s].transpose() * &qinv * &b[s],
                j11: a[s].transpose() * &qinv * &a[s],
                j12: a[s].transpose() * &qinv,
                j22: qinv.clone(),
                h2: &qinv * &b[s],
            });
            trans_log_norm.push(0.5 * b[s].dot(&(&qinv * &b[s])) + 0.5 * logdet + d as f64 / 2.0 * LN_2PI);
        }
        Ok(GlobalExpectedStats {
            init_h: h0,
            init_j: j0,
            init_log_norm,
            trans,
            trans_log_norm,
            log_pi0: pi0.iter().map(|p| p.ln()).collect(),
            log_pi: pi.map(|p| p.ln()),
        })
    }
}

/// Expected statistics of the continuous chain in the form the MF maps need.
#[derive(Debug, Clone)]
pub struct ChainStats {
    pub mean: Vec<Vec64>,
    pub second: Vec<Mat>,
    pub cross: Vec<Mat>,
    pub log_z: f64,
}

impl ChainStats {
    pub fn from_smooth(sm: &chain::SmoothResult, log_z: f64) -> Self {
        ChainStats {
            mean: sm.mean.clone(),
            second: sm.second.clone(),
            cross: sm.cross.clone(),
            log_z,
        }
    }
}

/// Continuous-block MF update: each transition is the q(k_t)-weighted convex
/// combination of the per-state expected blocks; init and recognition
/// potentials pass through.
pub fn mf_to_continuous(
    g: &GlobalExpectedStats,
    q_k: &[Vec<f64>],
    recog: &[(Vec64, Mat)],
) -> Result<ChainPotentials> {
    let t_len = recog.len();
    let d = g.dim();
    let k = g.n_states();
    if q_k.len() + 1 != t_len {
        return Err(SvaeError::DimMismatch(format!(
            "discrete marginals cover T-1 = {} steps, got {}",
            t_len - 1,
            q_k.len()
        )));
    }
    let mut trans = Vec::with_capacity(t_len - 1);
    for w in q_k {
        if w.len() != k {
            return Err(SvaeError::DimMismatch("marginal row length".into()));
        }
        let mut blk = TransitionPotential::zeros(d);
        for (j, &wj) in w.iter().enumerate() {
            blk.add_assign_scaled(&g.trans[j], wj);
        }
        trans.push(blk);
    }
    Ok(ChainPotentials {
        init_h: g.init_h.clone(),
        init_j: g.init_j.clone(),
        trans,
        recog: recog.to_vec(),
    })
}

/// Per-step discrete potential: obs_t(k) = ⟨θ̄_k, E[t(z_{t-1}, z_t)]⟩ -
/// E[log Z(t(θ_k))].
pub fn expected_pair_score(tr: &TransitionPotential, stats: &ChainStats, t: usize) -> f64 {
    -tr.h1.dot(&stats.mean[t]) - 0.5 * linalg::frob(&tr.j11, &stats.second[t])
        + linalg::frob(&tr.j12, &stats.cross[t])
        - 0.5 * linalg::frob(&tr.j22, &stats.second[t + 1])
        + tr.h2.dot(&stats.mean[t + 1])
}

/// Discrete-block MF update.
pub fn mf_to_discrete(g: &GlobalExpectedStats, stats: &ChainStats) -> Result<HmmPotentials> {
    let t_len = stats.mean.len();
    if stats.cross.len() + 1 != t_len || stats.second.len() != t_len {
        return Err(SvaeError::DimMismatch("chain stats lengths".into()));
    }
    let k = g.n_states();
    let mut obs = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        let mut row = Vec::with_capacity(k);
        for j in 0..k {
            row.push(expected_pair_score(&g.trans[j], stats, t) - g.trans_log_norm[j]);
        }
        obs.push(row);
    }
    Ok(HmmPotentials {
        log_pi0: g.log_pi0.clone(),
        log_pi: g.log_pi.clone(),
        obs,
    })
}

/// Which belief-propagation engine the block updates use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpMode {
    Sequential,
    Parallel,
}

/// Options for [`block_update`].
#[derive(Debug, Clone, Copy)]
pub struct BlockUpdateConfig {
    pub max_iters: usize,
    /// Stop when the fixed-point residual ∞-norm falls below this.
    pub tol_residual: f64,
    /// Stop when the per-sweep surrogate change falls below this.
    pub tol_surrogate: f64,
    pub bp: BpMode,
}

impl Default for BlockUpdateConfig {
    fn default() -> Self {
        BlockUpdateConfig {
            max_iters: 100,
            tol_residual: 1e-10,
            tol_surrogate: 1e-14,
            bp: BpMode::Sequential,
        }
    }
}

/// State of the two mean-field blocks plus the convergence trace.
#[derive(Debug, Clone)]
pub struct MeanFieldState {
    pub omega_z: ChainPotentials,
    pub omega_k: HmmPotentials,
    pub mu_z: ChainStats,
    pub mu_k: HmmMarginals,
    /// Surrogate-objective value after each sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    /// ∞-norm of the fixed-point residual at termination.
    pub residual: f64,
}

fn run_chain_bp(
    p: &ChainPotentials,
    bp: BpMode,
    pool: Option<&ThreadPool>,
) -> Result<ChainStats> {
    match bp {
        BpMode::Sequential => {
            let fr = chain::kalman_filter(p)?;
            let sm = chain::kalman_smooth(p, &fr)?;
            Ok(ChainStats::from_smooth(&sm, fr.log_z))
        }
        BpMode::Parallel => {
            let (fr, _) = crate::parallel::parallel_filter(p, pool)?;
            let (sm, _) = crate::parallel::parallel_smooth(p, &fr, pool)?;
            Ok(ChainStats::from_smooth(&sm, fr.log_z))
        }
    }
}

/// The surrogate objective restricted to the local blocks (prior KL excluded);
/// exact for any (ω_z, ω_k), optimal or not. Block coordinate ascent is
/// non-decreasing in this value.
pub fn surrogate_local(
    g: &GlobalExpectedStats,
    recog: &[(Vec64, Mat)],
    omega_z: &ChainPotentials,
    mu_z: &ChainStats,
    omega_k: &HmmPotentials,
    mu_k: &HmmMarginals,
) -> f64 {
    let t_len = recog.len();
    // ⟨E-init + λ, singleton stats⟩
    let mut value = g.init_h.dot(&mu_z.mean[0]) - 0.5 * linalg::frob(&g.init_j, &mu_z.second[0]);
    for t in 0..t_len {
        value += recog[t].0.dot(&mu_z.mean[t]) - 0.5 * linalg::frob(&recog[t].1, &mu_z.second[t]);
    }
    // CROSS = Σ_t Σ_j q_tj ⟨θ̄_j, E t(pair)⟩ and the q-weighted normalizers.
    for t in 0..t_len - 1 {
        for j in 0..g.n_states() {
            let w = mu_k.marginal[t][j];
            value += w * (expected_pair_score(&g.trans[j], mu_z, t) - g.trans_log_norm[j]);
        }
    }
    value -= g.init_log_norm;
    // - E log q(z) = logZ(ω_z) - ⟨ω_z, μ_z⟩
    let mut omega_dot = omega_z.init_h.dot(&mu_z.mean[0])
        - 0.5 * linalg::frob(&omega_z.init_j, &mu_z.second[0]);
    for t in 0..t_len {
        omega_dot += omega_z.recog[t].0.dot(&mu_z.mean[t])
            - 0.5 * linalg::frob(&omega_z.recog[t].1, &mu_z.second[t]);
    }
    for (t, tr) in omega_z.trans.iter().enumerate() {
        omega_dot += expected_pair_score(tr, mu_z, t);
    }
    value += mu_z.log_z - omega_dot;
    // - E log q(k): pairwise and prior terms cancel; obs terms remain.
    let mut obs_dot = 0.0;
    for (t, row) in omega_k.obs.iter().enumerate() {
        for (j, o) in row.iter().enumerate() {
            obs_dot += o * mu_k.marginal[t][j];
        }
    }
    value += mu_k.log_z - obs_dot;
    value
}

/// Flatten the variable part of (ω_z, ω_k): the T-1 transition blocks
/// (h1, J11, J12, J22, h2 in row-major) followed by the Tk×K obs potentials.
pub fn flatten_omega(omega_z: &ChainPotentials, omega_k: &HmmPotentials) -> Vec<f64> {
    let d = omega_z.dim();
    let mut out = Vec::new();
    for tr in &omega_z.trans {
        out.extend(tr.h1.iter());
        for i in 0..d {
            for j in 0..d {
                out.push(tr.j11[(i, j)]);
            }
        }
        for i in 0..d {
            for j in 0..d {
                out.push(tr.j12[(i, j)]);
            }
        }
        for i in 0..d {
            for j in 0..d {
                out.push(tr.j22[(i, j)]);
            }
        }
        out.extend(tr.h2.iter());
    }
    for row in &omega_k.obs {
        out.extend(row.iter());
    }
    out
}

/// Fixed-point residual g(ω) = ω - MF(BP(ω)), with BP and MF applied in
/// parallel (Jacobi) for both blocks. Zero exactly at block-update fixed
/// points.
pub fn g_residual(
    g: &GlobalExpectedStats,
    recog: &[(Vec64, Mat)],
    omega_z: &ChainPotentials,
    omega_k: &HmmPotentials,
    bp: BpMode,
    pool: Option<&ThreadPool>,
) -> Result<Vec<f64>> {
    let mu_z = run_chain_bp(omega_z, bp, pool)?;
    let mu_k = hmm::forward_backward(omega_k)?;
    let new_z = mf_to_continuous(g, &mu_k.marginal, recog)?;
    let new_k = mf_to_discrete(g, &mu_z)?;
    let cur = flatten_omega(omega_z, omega_k);
    let new = flatten_omega(&new_z, &new_k);
    Ok(cur.iter().zip(&new).map(|(a, b)| a - b).collect())
}

/// Block coordinate ascent (continuous block, then discrete block, per sweep)
/// starting from uniform discrete marginals.
pub fn block_update(
    g: &GlobalExpectedStats,
    recog: &[(Vec64, Mat)],
    cfg: &BlockUpdateConfig,
    pool: Option<&ThreadPool>,
) -> Result<MeanFieldState> {
    block_update_from(g, recog, cfg, pool, None)
}

/// Block coordinate ascent with explicit initial discrete marginals (used by
/// the imputation heuristic).
pub fn block_update_from(
    g: &GlobalExpectedStats,
    recog: &[(Vec64, Mat)],
    cfg: &BlockUpdateConfig,
    pool: Option<&ThreadPool>,
    init_q: Option<Vec<Vec<f64>>>,
) -> Result<MeanFieldState> {
    let t_len = recog.len();
    let k = g.n_states();
    if t_len < 2 {
        return Err(SvaeError::DimMismatch(
            "block_update needs T >= 2 (no discrete chain otherwise)".into(),
        ));
    }
    // init_expected_stats: uniform discrete marginals unless given.
    let mut q_k_marg: Vec<Vec<f64>> = match init_q {
        Some(q) => {
            if q.len() != t_len - 1 || q.iter().any(|row| row.len() != k) {
                return Err(SvaeError::DimMismatch(
                    "initial marginals must be (T-1) x K".into(),
                ));
            }
            q
        }
        None => vec![vec![1.0 / k as f64; k]; t_len - 1],
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut residual = f64::INFINITY;

    let mut omega_z;
    let mut mu_z;
    let mut omega_k;
    let mut mu_k;

    // First sweep outside the loop so the state variables are initialized.
    omega_z = mf_to_continuous(g, &q_k_marg, recog)?;
    mu_z = run_chain_bp(&omega_z, cfg.bp, pool)?;
    omega_k = mf_to_discrete(g, &mu_z)?;
    mu_k = hmm::forward_backward(&omega_k)?;
    q_k_marg.clone_from(&mu_k.marginal);
    let mut value = surrogate_local(g, recog, &omega_z, &mu_z, &omega_k, &mu_k);
    trace.push(value);
    let mut iters = 1;

    while iters < cfg.max_iters {
        // Residual of the current state (Jacobi form; the discrete half is
        // zero by construction right after a Gauss-Seidel sweep).
        let new_z = mf_to_continuous(g, &q_k_marg, recog)?;
        residual = flatten_omega(&omega_z, &omega_k)
            .iter()
            .zip(flatten_omega(&new_z, &omega_k).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if residual < cfg.tol_residual {
            converged = true;
            break;
        }

        omega_z = new_z;
        mu_z = run_chain_bp(&omega_z, cfg.bp, pool)?;
        omega_k = mf_to_discrete(g, &mu_z)?;
        mu_k = hmm::forward_backward(&omega_k)?;
        q_k_marg.clone_from(&mu_k.marginal);
        let prev = value;
        value = surrogate_local(g, recog, &omega_z, &mu_z, &omega_k, &mu_k);
        trace.push(value);
        iters += 1;

        if (value - prev).abs() < cfg.tol_surrogate {
            converged = true;
            // Refresh the residual for reporting.
            let new_z = mf_to_continuous(g, &q_k_marg, recog)?;
            residual = flatten_omega(&omega_z, &omega_k)
                .iter()
                .zip(flatten_omega(&new_z, &omega_k).iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            break;
        }
    }

    Ok(MeanFieldState {
        omega_z,
        omega_k,
        mu_z,
        mu_k,
        trace,
        converged,
        iters,
        residual,
    })
}

/// Random SLDS-style global expected stats (point-mass over θ) for tests.
pub fn random_point_globals(
    d: usize,
    k: usize,
    rng: &mut crate::rng::SeqRng,
) -> GlobalExpectedStats {
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut q = Vec::new();
    for _ in 0..k {
        a.push(Mat::from_fn(d, d, |_, _| rng.normal() * 0.5 / (d as f64).sqrt()));
        b.push(Vec64::from_fn(d, |_, _| rng.normal()));
        let w = Mat::from_fn(d, d, |_, _| rng.normal());
        q.push(&w * w.transpose() * (0.3 / d as f64) + Mat::identity(d, d) * 0.5);
    }
    let mu0 = Vec64::from_fn(d, |_, _| rng.normal());
    let w0 = Mat::from_fn(d, d, |_, _| rng.normal());
    let sigma0 = &w0 * w0.transpose() * (0.3 / d as f64) + Mat::identity(d, d);
    let mut pi0 = vec![0.0; k];
    for p in pi0.iter_mut() {
        *p = 0.2 + rng.uniform();
    }
    let z: f64 = pi0.iter().sum();
    for p in pi0.iter_mut() {
        *p /= z;
    }
    let mut pi = Mat::zeros(k, k);
    for i in 0..k {
        let mut row = vec![0.0; k];
        for r in row.iter_mut() {
            *r = 0.2 + rng.uniform();
        }
        let z: f64 = row.iter().sum();
        for (j, r) in row.iter().enumerate() {
            pi[(i, j)] = r / z;
        }
    }
    GlobalExpectedStats::from_point_estimate(&a, &b, &q, &mu0, &sigma0, &pi0, &pi).unwrap()
}

/// Random recognition potentials for tests.
pub fn random_recog(t_len: usize, d: usize, rng: &mut crate::rng::SeqRng) -> Vec<(Vec64, Mat)> {
    (0..t_len)
        .map(|_| {
            let r = Vec64::from_fn(d, |_, _| rng.normal());
            let diag = Vec64::from_fn(d, |_, _| 0.3 + rng.uniform());
            (r, Mat::from_diagonal(&diag))
        })
        .collect()
}
