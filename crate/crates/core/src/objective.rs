//! Exact evaluation of the ELBO decomposition and the surrogate objective:
//! prior KL over the global factors, local KLs for the continuous and discrete
//! blocks, and the Monte-Carlo reconstruction term.
//!
//! Sign convention: `elbo` and `surrogate` are the lower bounds being
//! maximized; the KL fields are the non-negative penalties, so
//! elbo = -(prior_kl + local_kl_total - reconstruction).

use crate::chain::ChainPotentials;
use crate::error::{Result, SvaeError};
use crate::expfam::{self, NaturalParams};
use crate::hmm::{HmmMarginals, HmmPotentials};
use crate::linalg::{frob, Mat, Vec64};
use crate::meanfield::{ChainStats, GlobalExpectedStats};

/// The loss decomposition of one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub prior_kl: f64,
    pub local_kl_continuous: f64,
    pub local_kl_discrete: f64,
    pub reconstruction: f64,
    pub elbo: f64,
    pub surrogate: f64,
}

impl LossBreakdown {
    pub fn local_kl_total(&self) -> f64 {
        self.local_kl_continuous + self.local_kl_discrete
    }
}

/// Sum of per-factor KL divergences between the variational posterior and the
/// prior over global parameters.
pub fn prior_kl(eta: &[NaturalParams], eta0: &[NaturalParams]) -> Result<f64> {
    if eta.len() != eta0.len() {
        return Err(SvaeError::FamilyMismatch(format!(
            "{} posterior factors vs {} prior factors",
            eta.len(),
            eta0.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in eta.iter().zip(eta0) {
        total += expfam::kl_divergence(a, b)?;
    }
    Ok(total)
}

/// ⟨λ, E_q t(z)⟩ over exactly the statistics that carry recognition potentials:
/// z_t (via r_t) and the diagonal of z_t z_tᵀ when R is diagonal; full R is
/// contracted against the full second moment.
pub fn recog_dot_stats(recog: &[(Vec64, Mat)], stats: &ChainStats) -> f64 {
    let mut total = 0.0;
    for (t, (r, rr)) in recog.iter().enumerate() {
        total += r.dot(&stats.mean[t]) - 0.5 * frob(rr, &stats.second[t]);
    }
    total
}

/// E_{q(θ)q(k)} of the z-chain prior log-normalizers: the initial factor plus
/// the q(k_t)-weighted per-state transition normalizers.
pub fn expected_prior_log_norm(g: &GlobalExpectedStats, q_k: &[Vec<f64>]) -> f64 {
    let mut total = g.init_log_norm;
    for row in q_k {
        for (j, w) in row.iter().enumerate() {
            total += w * g.trans_log_norm[j];
        }
    }
    total
}

/// Continuous-block local KL for the structured (single-block or SLDS z-block)
/// case, valid when ω is the surrogate-optimal chain for this λ:
/// ⟨λ, E_q t(z)⟩ - logZ(ω) + E_{q(θ)q(k)}[log Z(t(θ))].
pub fn local_kl_structured(
    recog: &[(Vec64, Mat)],
    stats: &ChainStats,
    expected_prior_log_z: f64,
) -> f64 {
    recog_dot_stats(recog, stats) - stats.log_z + expected_prior_log_z
}

/// Discrete-block local KL: ⟨obs potentials, marginals⟩ - logZ(ω_k). The prior
/// chain contributes log-normalizer 0 because each categorical factor is
/// normalized for every θ; any row-normalization slack of E[log π] lands in
/// -logZ(ω_k).
pub fn local_kl_discrete(q_k: &HmmMarginals, omega_k: &HmmPotentials) -> f64 {
    let mut dot = 0.0;
    for (t, row) in omega_k.obs.iter().enumerate() {
        for (j, o) in row.iter().enumerate() {
            dot += o * q_k.marginal[t][j];
        }
    }
    dot - q_k.log_z
}

/// Gaussian observation head: log N(x | mean, diag(var)) summed over a frame.
pub fn gaussian_log_likelihood(x: &Vec64, mean: &Vec64, var: &Vec64) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_3;
    let mut total = 0.0;
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        total += -0.5 * (LN_2PI + var[i].ln() + d * d / var[i]);
    }
    total
}

/// Gamma observation head with fixed concentration 2 and the given log-rate:
/// log p(x) = 2·log β + log x - βx (log Γ(2) = 0).
pub fn gamma2_log_likelihood(x: &Vec64, log_rate: &Vec64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        let beta = log_rate[i].exp();
        total += 2.0 * log_rate[i] + x[i].ln() - beta * x[i];
    }
    total
}

/// Monte-Carlo reconstruction: mean over samples of log p(x|z). The samples
/// must be reparameterized draws from q(z); the decoder is any per-sequence
/// log-likelihood evaluator.
pub fn reconstruction<F>(decoder_loglik: F, z_samples: &[Vec<Vec64>]) -> Result<f64>
where
    F: Fn(&[Vec64]) -> f64,
{
    if z_samples.is_empty() {
        return Err(SvaeError::Domain("reconstruction needs >= 1 sample".into()));
    }
    let total: f64 = z_samples.iter().map(|z| decoder_loglik(z)).sum();
    Ok(total / z_samples.len() as f64)
}

/// Surrogate objective: the ELBO with the reconstruction replaced by
/// ⟨λ, E_q t(z)⟩, i.e. -(prior_kl + local_kl_total - ⟨λ, E_q t(z)⟩).
pub fn surrogate_loss(prior_kl: f64, local_kl_total: f64, recog_dot: f64) -> f64 {
    -(prior_kl + local_kl_total - recog_dot)
}

/// Assemble the full breakdown from the parts.
pub fn breakdown(
    prior_kl: f64,
    local_kl_continuous: f64,
    local_kl_discrete: f64,
    reconstruction: f64,
    recog_dot: f64,
) -> LossBreakdown {
    let local = local_kl_continuous + local_kl_discrete;
    LossBreakdown {
        prior_kl,
        local_kl_continuous,
        local_kl_discrete,
        reconstruction,
        elbo: -(prior_kl + local - reconstruction),
        surrogate: surrogate_loss(prior_kl, local, recog_dot),
    }
}

/// LDS-style exact evidence for a linear-Gaussian observation model
/// x_t = C z_t + v, v ~ N(0, diag(obs_var)), with the chain prior given by
/// point-estimate globals. Dense computation, for oracle use.
pub fn linear_gaussian_evidence(
    prior: &ChainPotentials,
    c_mat: &Mat,
    obs_var: &Vec64,
    x: &[Vec64],
) -> Result<f64> {
    const LN_2PI: f64 = 1.837_877_066_409_345_3;
    let dx = obs_var.len();
    // p(x) = ∫ p(z) Π N(x_t; C z_t, diag) dz: fold the likelihood into
    // per-step recognition potentials and compare normalizers:
    // log p(x) = logZ(prior + likelihood potentials) - logZ(prior) + Σ const_t
    // where const_t collects the x-dependent and 2π terms of each likelihood.
    let mut with_obs = prior.clone();
    let mut const_term = 0.0;
    for (t, xt) in x.iter().enumerate() {
        let mut rinv_x = Vec64::zeros(dx);
        for i in 0..dx {
            rinv_x[i] = xt[i] / obs_var[i];
        }
        with_obs.recog[t].0 += c_mat.transpose() * &rinv_x;
        let mut ct_rinv_c = c_mat.transpose() * Mat::from_diagonal(&obs_var.map(|v| 1.0 / v)) * c_mat;
        crate::linalg::sym(&ct_rinv_c).clone_into(&mut ct_rinv_c);
        with_obs.recog[t].1 += &ct_rinv_c;
        for i in 0..dx {
            const_term += -0.5 * (LN_2PI + obs_var[i].ln() + xt[i] * xt[i] / obs_var[i]);
        }
    }
    let log_z_joint = crate::chain::kalman_filter(&with_obs)?.log_z;
    let log_z_prior = crate::chain::kalman_filter(prior)?.log_z;
    Ok(log_z_joint - log_z_prior + const_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{dirichlet_eval, mvn_eval, niw_eval};
    use crate::hmm;
    use crate::meanfield::{self, BlockUpdateConfig, BpMode};
    use crate::rng::SeqRng;

    #[test]
    fn prior_kl_zero_at_equality() {
        let s = Mat::identity(2, 2);
        let m = Vec64::zeros(2);
        let (eta, _, _) = niw_eval(&s, &m, 1.0, 3.0).unwrap();
        let kl = prior_kl(&[eta.clone()], &[eta]).unwrap();
        assert!(kl.abs() < 1e-10);
    }

    #[test]
    fn prior_kl_nonnegative_random() {
        let mut rng = SeqRng::new(60, 0);
        for _ in 0..1000 {
            let w = Mat::from_fn(2, 2, |_, _| rng.normal());
            let s1 = &w * w.transpose() + Mat::identity(2, 2) * 0.5;
            let w = Mat::from_fn(2, 2, |_, _| rng.normal());
            let s2 = &w * w.transpose() + Mat::identity(2, 2) * 0.5;
            let m1 = Vec64::from_fn(2, |_, _| rng.normal());
            let m2 = Vec64::from_fn(2, |_, _| rng.normal());
            let (e1, _, _) = niw_eval(&s1, &m1, 0.5 + rng.uniform(), 2.0 + rng.uniform()).unwrap();
            let (e2, _, _) = niw_eval(&s2, &m2, 0.5 + rng.uniform(), 2.0 + rng.uniform()).unwrap();
            let kl = prior_kl(&[e1], &[e2]).unwrap();
            assert!(kl >= -1e-10, "KL {kl}");
        }
    }

    #[test]
    fn prior_kl_single_factor_matches_expfam() {
        let (a, _, _) = dirichlet_eval(&[1.0, 2.0, 3.0]).unwrap();
        let (b, _, _) = dirichlet_eval(&[2.0, 2.0, 2.0]).unwrap();
        let kl1 = prior_kl(&[a.clone()], &[b.clone()]).unwrap();
        let kl2 = expfam::kl_divergence(&a, &b).unwrap();
        assert_eq!(kl1, kl2);
    }

    #[test]
    fn gaussian_kl_half_for_unit_shift() {
        let m1 = Vec64::from_column_slice(&[1.0]);
        let m0 = Vec64::zeros(1);
        let cov = Mat::identity(1, 1);
        let (e1, _, _) = mvn_eval(&m1, &cov).unwrap();
        let (e0, _, _) = mvn_eval(&m0, &cov).unwrap();
        let kl = expfam::kl_divergence(&e1, &e0).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn local_kl_zero_for_point_mass_and_no_recognition() {
        // q(θ) a point mass and λ = 0: q(z) = p(z|θ), so the local KL is 0.
        let mut rng = SeqRng::new(61, 0);
        let g = meanfield::random_point_globals(2, 1, &mut rng);
        let t_len = 4;
        let zero_recog: Vec<(Vec64, Mat)> =
            (0..t_len).map(|_| (Vec64::zeros(2), Mat::zeros(2, 2))).collect();
        let q = vec![vec![1.0]; t_len - 1];
        let omega = meanfield::mf_to_continuous(&g, &q, &zero_recog).unwrap();
        let fr = crate::chain::kalman_filter(&omega).unwrap();
        let sm = crate::chain::kalman_smooth(&omega, &fr).unwrap();
        let stats = ChainStats::from_smooth(&sm, fr.log_z);
        let kl = local_kl_structured(&zero_recog, &stats, expected_prior_log_norm(&g, &q));
        assert!(kl.abs() < 1e-8, "local KL {kl}");
    }

    #[test]
    fn local_kl_discrete_zero_at_zero_obs_with_point_mass() {
        // Normalized log-probabilities (point-mass θ) and zero obs: q(k) = p(k|θ).
        let p = HmmPotentials {
            log_pi0: vec![(0.3f64).ln(), (0.7f64).ln()],
            log_pi: Mat::from_row_slice(
                2,
                2,
                &[(0.6f64).ln(), (0.4f64).ln(), (0.2f64).ln(), (0.8f64).ln()],
            ),
            obs: vec![vec![0.0, 0.0]; 4],
        };
        let m = hmm::forward_backward(&p).unwrap();
        let kl = local_kl_discrete(&m, &p);
        assert!(kl.abs() < 1e-10, "KL {kl}");
    }

    #[test]
    fn local_kl_discrete_single_step_categorical() {
        let p = HmmPotentials {
            log_pi0: vec![(0.3f64).ln(), (0.7f64).ln()],
            log_pi: Mat::zeros(2, 2),
            obs: vec![vec![0.5, -0.25]],
        };
        let m = hmm::forward_backward(&p).unwrap();
        let kl = local_kl_discrete(&m, &p);
        // Direct categorical KL(softmax(logπ0+obs) ‖ π0).
        let logits: Vec<f64> = (0..2).map(|j| p.log_pi0[j] + p.obs[0][j]).collect();
        let lz = crate::expfam::special::logsumexp(&logits);
        let mut want = 0.0;
        for j in 0..2 {
            let q = (logits[j] - lz).exp();
            want += q * (logits[j] - lz - p.log_pi0[j]);
        }
        assert!((kl - want).abs() < 1e-12, "{kl} vs {want}");
    }

    #[test]
    fn local_kl_discrete_matches_enumeration() {
        let mut rng = SeqRng::new(62, 0);
        for _ in 0..20 {
            let p = hmm::random_hmm(2, 3, &mut rng);
            let m = hmm::forward_backward(&p).unwrap();
            let kl = local_kl_discrete(&m, &p);
            // Brute force Σ_paths q(path)·log(q(path)/p̄(path)) where p̄ uses the
            // same chain without obs.
            let prior = HmmPotentials {
                obs: vec![vec![0.0; 2]; 3],
                ..p.clone()
            };
            let mut want = 0.0;
            for code in 0..8usize {
                let path = [code % 2, (code / 2) % 2, (code / 4) % 2];
                let mut lq = p.log_pi0[path[0]] + p.obs[0][path[0]];
                let mut lp = prior.log_pi0[path[0]];
                for t in 1..3 {
                    lq += p.log_pi[(path[t - 1], path[t])] + p.obs[t][path[t]];
                    lp += prior.log_pi[(path[t - 1], path[t])];
                }
                let q = (lq - m.log_z).exp();
                want += q * (lq - m.log_z - lp);
            }
            assert!((kl - want).abs() < 1e-9, "{kl} vs {want}");
        }
    }

    #[test]
    fn jensen_gap_nonnegative_without_recognition() {
        // λ = 0 but q(θ) non-degenerate: the local KL equals the Jensen gap
        // E[logZ(t(θ))] - logZ(E t(θ)) >= 0.
        let mut rng = SeqRng::new(63, 0);
        let s = Mat::identity(2, 2) * 1.3;
        let m = Vec64::from_column_slice(&[0.4, -0.2]);
        let (_, mu_init, _) = niw_eval(&s, &m, 2.0, 4.0).unwrap();
        let (h0, j0, init_log_norm) = GlobalExpectedStats::init_from_niw_stats(&mu_init).unwrap();
        let sm = Mat::identity(2, 2) * 0.8;
        let mm = Mat::from_fn(2, 3, |i, j| if i == j { 0.7 } else { 0.05 });
        let vm = Mat::identity(3, 3) * 2.0;
        let (_, mu_tr, _) = crate::expfam::mniw_eval(&sm, &mm, &vm, 4.5).unwrap();
        let (blk, tr_log_norm) = GlobalExpectedStats::trans_from_mniw_stats(&mu_tr).unwrap();
        let g = GlobalExpectedStats {
            init_h: h0,
            init_j: j0,
            init_log_norm,
            trans: vec![blk],
            trans_log_norm: vec![tr_log_norm],
            log_pi0: vec![0.0],
            log_pi: Mat::zeros(1, 1),
        };
        let _ = &mut rng;
        let t_len = 3;
        let zero_recog: Vec<(Vec64, Mat)> =
            (0..t_len).map(|_| (Vec64::zeros(2), Mat::zeros(2, 2))).collect();
        let q = vec![vec![1.0]; t_len - 1];
        let omega = meanfield::mf_to_continuous(&g, &q, &zero_recog).unwrap();
        let fr = crate::chain::kalman_filter(&omega).unwrap();
        let sm_r = crate::chain::kalman_smooth(&omega, &fr).unwrap();
        let stats = ChainStats::from_smooth(&sm_r, fr.log_z);
        let kl = local_kl_structured(&zero_recog, &stats, expected_prior_log_norm(&g, &q));
        // Jensen gap: E[logZ(t(θ))] - logZ at expected parameters = KL here.
        let gap = expected_prior_log_norm(&g, &q) - fr.log_z;
        assert!(kl >= 0.0, "KL {kl}");
        assert!((kl - gap).abs() < 1e-10);
    }

    #[test]
    fn surrogate_identity_holds() {
        let mut rng = SeqRng::new(64, 0);
        let g = meanfield::random_point_globals(2, 2, &mut rng);
        let recog = meanfield::random_recog(5, 2, &mut rng);
        // The structured local-KL formula is exact at the block optimum, so
        // converge tightly before comparing.
        let cfg = BlockUpdateConfig {
            max_iters: 500,
            tol_residual: 1e-13,
            tol_surrogate: 0.0,
            bp: BpMode::Sequential,
        };
        let st = meanfield::block_update(&g, &recog, &cfg, None).unwrap();
        let recog_dot = recog_dot_stats(&recog, &st.mu_z);
        let kl_z = local_kl_structured(
            &recog,
            &st.mu_z,
            expected_prior_log_norm(&g, &st.mu_k.marginal),
        );
        let kl_k = local_kl_discrete(&st.mu_k, &st.omega_k);
        let pk = 0.37; // arbitrary prior-KL stand-in; the identity is algebraic
        let b = breakdown(pk, kl_z, kl_k, -12.3, recog_dot);
        assert!(
            (b.surrogate - -(pk + kl_z + kl_k - recog_dot)).abs() < 1e-12,
            "surrogate identity"
        );
        assert!((b.elbo - -(pk + kl_z + kl_k - -12.3)).abs() < 1e-12);

        // The surrogate (sans prior KL) agrees with the meanfield trace value.
        let local = meanfield::surrogate_local(&g, &recog, &st.omega_z, &st.mu_z, &st.omega_k, &st.mu_k);
        let from_kls = -(kl_z + kl_k - recog_dot);
        assert!(
            (local - from_kls).abs() < 1e-8,
            "{local} vs {from_kls}"
        );
    }

    #[test]
    fn surrogate_optimum_maximizes_elbo_under_conjugate_likelihood() {
        // With λ proportional to an actual conjugate likelihood, the surrogate
        // optimum is the exact posterior; perturbing ω can only lower the ELBO.
        let mut rng = SeqRng::new(65, 0);
        let g = meanfield::random_point_globals(1, 1, &mut rng);
        let t_len = 3;
        let c = Mat::identity(1, 1);
        let obs_var = Vec64::from_column_slice(&[0.5]);
        let x: Vec<Vec64> = (0..t_len)
            .map(|_| Vec64::from_column_slice(&[rng.normal()]))
            .collect();
        let recog: Vec<(Vec64, Mat)> = x
            .iter()
            .map(|xt| {
                (
                    c.transpose() * Vec64::from_column_slice(&[xt[0] / obs_var[0]]),
                    c.transpose() * Mat::from_row_slice(1, 1, &[1.0 / obs_var[0]]) * &c,
                )
            })
            .collect();
        let q = vec![vec![1.0]; t_len - 1];
        let omega = meanfield::mf_to_continuous(&g, &q, &recog).unwrap();
        let prior = meanfield::mf_to_continuous(
            &g,
            &q,
            &(0..t_len).map(|_| (Vec64::zeros(1), Mat::zeros(1, 1))).collect::<Vec<_>>(),
        )
        .unwrap();

        let elbo_of = |om: &ChainPotentials| -> f64 {
            let fr = crate::chain::kalman_filter(om).unwrap();
            let smr = crate::chain::kalman_smooth(om, &fr).unwrap();
            let stats = ChainStats::from_smooth(&smr, fr.log_z);
            let kl = local_kl_structured(&recog, &stats, expected_prior_log_norm(&g, &q))
                + (recog_dot_other(om, &recog, &stats));
            // exact reconstruction E_q log N(x; z, var):
            let mut recon = 0.0;
            for t in 0..t_len {
                let var = stats.second[t][(0, 0)] - stats.mean[t][0] * stats.mean[t][0];
                recon += gaussian_log_likelihood(&x[t], &stats.mean[t], &obs_var)
                    - 0.5 * var / obs_var[0];
            }
            recon - kl
        };
        // For the optimal omega, the local KL formula applies directly (the
        // recog_dot_other correction is zero there by construction).
        fn recog_dot_other(
            _om: &ChainPotentials,
            _recog: &[(Vec64, Mat)],
            _stats: &ChainStats,
        ) -> f64 {
            0.0
        }

        let evidence = linear_gaussian_evidence(&prior, &c, &obs_var, &x).unwrap();
        let at_opt = elbo_of(&omega);
        assert!(
            (at_opt - evidence).abs() < 1e-8,
            "conjugate ELBO {at_opt} vs evidence {evidence}"
        );
        // Random perturbations cannot beat the optimum (and the KL formula is
        // only exact at the optimum, so compare through the evidence).
        for _ in 0..5 {
            let mut pert = omega.clone();
            pert.recog[1].0[0] += rng.normal() * 0.1;
            pert.recog[0].1[(0, 0)] += rng.uniform() * 0.1;
            // Generic ELBO for arbitrary q(z;ω): E[log p(z)] + E[log p(x|z)] + H[q].
            let fr = crate::chain::kalman_filter(&pert).unwrap();
            let smr = crate::chain::kalman_smooth(&pert, &fr).unwrap();
            let stats = ChainStats::from_smooth(&smr, fr.log_z);
            // E log p(z) - E log q(z) = ⟨prior - ω, E t⟩ - logZ(prior)... compute
            // via: KL(q ‖ p_z) = ⟨ω - prior, μ⟩ - logZ(ω) + logZ(prior).
            let dot = |om: &ChainPotentials| -> f64 {
                let mut v = om.init_h.dot(&stats.mean[0]) - 0.5 * frob(&om.init_j, &stats.second[0]);
                for t in 0..t_len {
                    v += om.recog[t].0.dot(&stats.mean[t]) - 0.5 * frob(&om.recog[t].1, &stats.second[t]);
                }
                for (t, tr) in om.trans.iter().enumerate() {
                    v += crate::meanfield::expected_pair_score(tr, &stats, t);
                }
                v
            };
            let prior_lz = crate::chain::kalman_filter(&prior).unwrap().log_z;
            let kl_q_p = dot(&pert) - dot(&prior) - stats.log_z + prior_lz;
            let mut recon = 0.0;
            for t in 0..t_len {
                let var = stats.second[t][(0, 0)] - stats.mean[t][0] * stats.mean[t][0];
                recon += gaussian_log_likelihood(&x[t], &stats.mean[t], &obs_var)
                    - 0.5 * var / obs_var[0];
            }
            let elbo = recon - kl_q_p;
            assert!(
                elbo <= evidence + 1e-8,
                "perturbed ELBO {elbo} exceeds evidence {evidence}"
            );
        }
    }

    #[test]
    fn reconstruction_determinism_and_identity_case() {
        // Identity decoder with unit variance at z = x gives -(Dx/2)·log2π per step.
        let x = vec![Vec64::from_column_slice(&[0.3, -1.2]); 4];
        let decoder = |z: &[Vec64]| -> f64 {
            let unit = Vec64::from_column_slice(&[1.0, 1.0]);
            z.iter()
                .zip(&x)
                .map(|(zt, xt)| gaussian_log_likelihood(xt, zt, &unit))
                .sum()
        };
        let z_eq: Vec<Vec<Vec64>> = vec![x.clone()];
        let r = reconstruction(decoder, &z_eq).unwrap();
        let want = -(2.0 / 2.0) * 1.837_877_066_409_345_3 * 4.0;
        assert!((r - want).abs() < 1e-12);
        assert!(reconstruction(decoder, &[]).is_err());
    }

    #[test]
    fn gamma_head_matches_density_formula() {
        let x = Vec64::from_column_slice(&[0.7, 2.5]);
        let log_rate = Vec64::from_column_slice(&[0.3, -0.4]);
        let got = gamma2_log_likelihood(&x, &log_rate);
        let mut want = 0.0;
        for i in 0..2 {
            let beta: f64 = log_rate[i].exp();
            // Gamma(shape=2, rate=β): β² x e^{-βx} / Γ(2)
            want += (beta * beta * x[i] * (-beta * x[i]).exp()).ln();
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn surrogate_trace_nondecreasing_on_random_slds() {
        let mut rng = SeqRng::new(66, 0);
        let g = meanfield::random_point_globals(2, 3, &mut rng);
        let recog = meanfield::random_recog(20, 2, &mut rng);
        let cfg = BlockUpdateConfig {
            max_iters: 50,
            tol_residual: 0.0,
            tol_surrogate: 0.0,
            bp: BpMode::Sequential,
        };
        let st = meanfield::block_update(&g, &recog, &cfg, None).unwrap();
        for w in st.trace.windows(2) {
            assert!(w[1] - w[0] >= -1e-9);
        }
    }
}
