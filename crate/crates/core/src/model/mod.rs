//! Full SVAE assembly: dense encoder/decoder, variational posterior over the
//! global graphical-model parameters, inference, loss, three-stage training,
//! and missing-data imputation.

pub mod checkpoint;
pub mod nets;
pub mod optimizer;

use std::collections::BTreeMap;
use std::path::Path;


use crate::chain::ChainPotentials;
use crate::diff::chain::{filter_smooth, sample_posterior as taped_sample};
use crate::diff::expfam::{
    build_dirichlet_factor, build_mniw_factor, build_niw_factor, init_blocks_from_niw,
    mniw_unconstrained_dim, niw_unconstrained_dim, trans_blocks_from_mniw, ParamRoute,
    TapedDirichletFactor, TapedMniwFactor, TapedNiwFactor,
};
use crate::diff::hmm::forward_backward as taped_fb;
use crate::diff::loss as taped_loss;
use crate::diff::meanfield::{build_g_residual, mf_to_continuous, TapedGlobals};
use crate::diff::tape::{grad_or_zero, Tape, VarId};
use crate::error::{Result, SvaeError};
use crate::expfam::{self, NaturalParams};
use crate::gradients::{richardson_solve, GradMode};
use crate::linalg::{Mat, Vec64};
use crate::meanfield::{
    self, BlockUpdateConfig, BpMode, ChainStats, GlobalExpectedStats, MeanFieldState,
};
use crate::objective::{self, LossBreakdown};
use crate::param_space::Bijector;
use crate::rng::SeqRng;

use nets::{Activation, DenseNet};
use optimizer::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lds,
    Slds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsModel {
    Gaussian,
    /// Gamma likelihood with fixed concentration 2; the decoder outputs log rates.
    Gamma2,
}

/// Variational posterior over the global parameters, stored unconstrained.
#[derive(Debug, Clone)]
pub struct GlobalPosterior {
    pub d: usize,
    pub k: usize,
    pub niw_u: Mat,
    pub mniw_u: Vec<Mat>,
    /// Dirichlet rows (initial distribution + one per transition row); empty
    /// for the LDS.
    pub pi0_u: Option<Mat>,
    pub pi_u: Vec<Mat>,
    pub niw_prior: NaturalParams,
    pub mniw_prior: NaturalParams,
    pub pi_prior: Option<NaturalParams>,
}

impl GlobalPosterior {
    pub fn new(d: usize, k: usize, rng: &mut SeqRng) -> Result<Self> {
        // Weakly-informative priors.
        let (niw_prior, _, _) = expfam::niw_eval(
            &(Mat::identity(d, d) * d as f64),
            &Vec64::zeros(d),
            1.0,
            d as f64 + 1.0,
        )?;
        // Random-walk prior dynamics (A = I, b = 0): states parked at the
        // prior still explain smooth trajectories, so they stay competitive
        // instead of being ratcheted out.
        let mut prior_m = Mat::zeros(d, d + 1);
        for i in 0..d {
            prior_m[(i, i)] = 1.0;
        }
        let (mniw_prior, _, _) = expfam::mniw_eval(
            &(Mat::identity(d, d) * (0.25 * d as f64)),
            &prior_m,
            &Mat::identity(d + 1, d + 1),
            d as f64 + 1.0,
        )?;
        let pi_prior = if k > 1 {
            Some(expfam::dirichlet_eval(&vec![1.0; k])?.0)
        } else {
            None
        };

        // Initial posterior: moderate-confidence NIW at (I, 0) and per-state
        // MNIW whose mean dynamics are distinct stable linear maps.
        let spd_d = Bijector::SpdCorrelationCholesky { n: d };
        let mut niw_u = vec![0.0; niw_unconstrained_dim(d)];
        let s_init: Vec<f64> = spd_d.inverse(Mat::identity(d, d).as_slice())?;
        niw_u[..s_init.len()].copy_from_slice(&s_init);
        for v in niw_u[s_init.len()..s_init.len() + d].iter_mut() {
            *v = rng.normal() * 0.1;
        }
        niw_u[s_init.len() + d] = crate::param_space::softplus_inv(1.0);
        niw_u[s_init.len() + d + 1] = crate::param_space::softplus_inv(2.0);

        let spd_m = Bijector::SpdCorrelationCholesky { n: d + 1 };
        let mut mniw_u = Vec::with_capacity(k);
        for state in 0..k {
            let mut u = vec![0.0; mniw_unconstrained_dim(d, d + 1)];
            let s_part: Vec<f64> = spd_d.inverse((Mat::identity(d, d) * (0.5 * d as f64)).as_slice())?;
            u[..s_part.len()].copy_from_slice(&s_part);
            // Mean dynamics: near-identity maps with state-dependent drift and
            // rotation so the states start distinguishable.
            let angle = 2.0 * std::f64::consts::PI * state as f64 / k.max(1) as f64;
            let mut m = Mat::zeros(d, d + 1);
            for i in 0..d {
                m[(i, i)] = 0.9;
                if d > 1 {
                    m[(i, (i + 1) % d)] += 0.15 * angle.sin();
                }
                m[(i, d)] = 0.5 * if i % 2 == 0 { angle.cos() } else { angle.sin() };
            }
            for i in 0..d {
                for j in 0..=d {
                    m[(i, j)] += rng.normal() * 0.05;
                }
            }
            // Row-major M into the unconstrained slot.
            let mut at = s_part.len();
            for i in 0..d {
                for j in 0..=d {
                    u[at] = m[(i, j)];
                    at += 1;
                }
            }
            let v_part: Vec<f64> =
                spd_m.inverse((Mat::identity(d + 1, d + 1) * 3.0).as_slice())?;
            u[at..at + v_part.len()].copy_from_slice(&v_part);
            u[at + v_part.len()] = crate::param_space::softplus_inv(d as f64 + 2.0);
            mniw_u.push(Mat::from_column_slice(u.len(), 1, &u));
        }

        let (pi0_u, pi_u) = if k > 1 {
            // Mildly sticky transitions: enough to favor segments, weak enough
            // that early block updates can still move mass between states.
            let pi0 = Mat::from_fn(k, 1, |_, _| {
                crate::param_space::softplus_inv(1.0) + rng.normal() * 0.01
            });
            let mut rows = Vec::with_capacity(k);
            for i in 0..k {
                let mut row = Mat::from_fn(k, 1, |_, _| {
                    crate::param_space::softplus_inv(1.0) + rng.normal() * 0.01
                });
                row[(i, 0)] = crate::param_space::softplus_inv(4.0 * k as f64);
                rows.push(row);
            }
            (Some(pi0), rows)
        } else {
            (None, Vec::new())
        };

        Ok(GlobalPosterior {
            d,
            k,
            niw_u: Mat::from_column_slice(niw_u.len(), 1, &niw_u),
            mniw_u,
            pi0_u,
            pi_u,
            niw_prior,
            mniw_prior,
            pi_prior,
        })
    }

    fn nu_shift(d: usize) -> f64 {
        d as f64 - 1.0 + 0.1
    }

    /// Forward the unconstrained parameters to natural parameters (plain).
    pub fn natural_params(&self) -> Result<(NaturalParams, Vec<NaturalParams>, Vec<NaturalParams>)> {
        let d = self.d;
        let spd_d = Bijector::SpdCorrelationCholesky { n: d };
        let spd_dim = spd_d.unconstrained_dim();
        let u = self.niw_u.as_slice();
        let s_vals = spd_d.forward(&u[..spd_dim])?;
        let s = Mat::from_row_slice(d, d, &s_vals);
        let m = Vec64::from_column_slice(&u[spd_dim..spd_dim + d]);
        let lambda = crate::param_space::softplus(u[spd_dim + d]);
        let nu = crate::param_space::softplus(u[spd_dim + d + 1]) + Self::nu_shift(d);
        let (niw_eta, _, _) = expfam::niw_eval(&s, &m, lambda, nu)?;

        let spd_m = Bijector::SpdCorrelationCholesky { n: d + 1 };
        let spd_m_dim = spd_m.unconstrained_dim();
        let mut mniw_etas = Vec::with_capacity(self.k);
        for u in &self.mniw_u {
            let u = u.as_slice();
            let s_vals = spd_d.forward(&u[..spd_dim])?;
            let s = Mat::from_row_slice(d, d, &s_vals);
            let m_mat = Mat::from_row_slice(d, d + 1, &u[spd_dim..spd_dim + d * (d + 1)]);
            let v_vals = spd_m.forward(&u[spd_dim + d * (d + 1)..spd_dim + d * (d + 1) + spd_m_dim])?;
            let v = Mat::from_row_slice(d + 1, d + 1, &v_vals);
            let nu = crate::param_space::softplus(u[spd_dim + d * (d + 1) + spd_m_dim])
                + Self::nu_shift(d);
            mniw_etas.push(expfam::mniw_eval(&s, &m_mat, &v, nu)?.0);
        }

        let mut dir_etas = Vec::new();
        if let Some(pi0) = &self.pi0_u {
            let alpha: Vec<f64> = pi0.iter().map(|&x| crate::param_space::softplus(x)).collect();
            dir_etas.push(expfam::dirichlet_eval(&alpha)?.0);
            for row in &self.pi_u {
                let alpha: Vec<f64> =
                    row.iter().map(|&x| crate::param_space::softplus(x)).collect();
                dir_etas.push(expfam::dirichlet_eval(&alpha)?.0);
            }
        }
        Ok((niw_eta, mniw_etas, dir_etas))
    }

    /// Digest into the blocks the local chains need (plain path).
    pub fn expected_stats(&self) -> Result<GlobalExpectedStats> {
        let (niw_eta, mniw_etas, dir_etas) = self.natural_params()?;
        let (niw_mu, _) = expfam::eval_natural(&niw_eta)?;
        let (h0, j0, init_log_norm) = GlobalExpectedStats::init_from_niw_stats(&niw_mu)?;
        let mut trans = Vec::with_capacity(self.k);
        let mut trans_log_norm = Vec::with_capacity(self.k);
        for eta in &mniw_etas {
            let (mu, _) = expfam::eval_natural(eta)?;
            let (blk, ln) = GlobalExpectedStats::trans_from_mniw_stats(&mu)?;
            trans.push(blk);
            trans_log_norm.push(ln);
        }
        let (log_pi0, log_pi) = if self.k > 1 {
            let (mu0, _) = expfam::eval_natural(&dir_etas[0])?;
            let mut log_pi = Mat::zeros(self.k, self.k);
            for i in 0..self.k {
                let (mu, _) = expfam::eval_natural(&dir_etas[1 + i])?;
                for j in 0..self.k {
                    log_pi[(i, j)] = mu.data[j];
                }
            }
            (mu0.data, log_pi)
        } else {
            (vec![0.0], Mat::zeros(1, 1))
        };
        Ok(GlobalExpectedStats {
            init_h: h0,
            init_j: j0,
            init_log_norm,
            trans,
            trans_log_norm,
            log_pi0,
            log_pi,
        })
    }

    /// Prior KL over all factors (plain path).
    pub fn prior_kl(&self) -> Result<f64> {
        let (niw_eta, mniw_etas, dir_etas) = self.natural_params()?;
        let mut total = expfam::kl_divergence(&niw_eta, &self.niw_prior)?;
        for eta in &mniw_etas {
            total += expfam::kl_divergence(eta, &self.mniw_prior)?;
        }
        if let Some(prior) = &self.pi_prior {
            for eta in &dir_etas {
                total += expfam::kl_divergence(eta, prior)?;
            }
        }
        Ok(total)
    }
}

/// Fixed standard-normal globals used by stage-1 VAE training.
fn standard_normal_globals(d: usize) -> GlobalExpectedStats {
    GlobalExpectedStats::from_point_estimate(
        &[Mat::zeros(d, d)],
        &[Vec64::zeros(d)],
        &[Mat::identity(d, d)],
        &Vec64::zeros(d),
        &Mat::identity(d, d),
        &[1.0],
        &Mat::from_element(1, 1, 1.0),
    )
    .expect("standard normal globals")
}

/// The full model.
#[derive(Debug, Clone)]
pub struct SvaeModel {
    pub kind: ModelKind,
    pub d: usize,
    pub dx: usize,
    pub k: usize,
    pub encoder: DenseNet,
    pub decoder: DenseNet,
    pub obs: ObsModel,
    /// Unconstrained per-dimension observation variance (Gaussian head).
    pub obs_log_var_u: Mat,
    pub globals: GlobalPosterior,
    pub n_mc: usize,
    pub bp: BpMode,
    pub mf_cfg: BlockUpdateConfig,
}

/// Result of posterior inference on one sequence.
pub struct InferState {
    pub omega_z: ChainPotentials,
    pub stats: ChainStats,
    pub mf: Option<MeanFieldState>,
}

/// Options for one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub adam_lr: f64,
    pub nat_lr: f64,
    pub grad_mode: GradMode,
    /// Drop the ∂L/∂ω·∂ω/∂η correction term (the biased prior-work estimator).
    pub drop_correction: bool,
    /// Stage-1 behavior: standard-normal prior, no global factors.
    pub vae_stage: bool,
    /// Natural route (custom nodes) vs plain gradients for the θ factors.
    pub route: ParamRoute,
    pub update_nets: bool,
    pub update_globals: bool,
    pub seed: u64,
}

/// Per-sequence gradient bundle (fixed parameter order: encoder w/b pairs,
/// decoder w/b pairs, observation variance; then NIW, MNIWs, π₀, π rows).
#[derive(Debug, Clone)]
pub struct SequenceGradients {
    pub loss: LossBreakdown,
    pub net_grads: Vec<Mat>,
    pub global_grads: Vec<Mat>,
    pub forward_sweeps: usize,
    pub stored_states: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub loss: LossBreakdown,
    pub grad_norm_nets: f64,
    pub grad_norm_globals: f64,
    pub forward_sweeps: usize,
    pub stored_states: usize,
}

struct TapedModel {
    enc_leaves: Vec<(VarId, VarId)>,
    dec_leaves: Vec<(VarId, VarId)>,
    obs_var_leaf: VarId,
    niw: Option<TapedNiwFactor>,
    mniw: Vec<TapedMniwFactor>,
    pi0: Option<TapedDirichletFactor>,
    pi_rows: Vec<TapedDirichletFactor>,
    globals: TapedGlobals,
    prior_kl: Option<VarId>,
}

impl SvaeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ModelKind,
        d: usize,
        dx: usize,
        k: usize,
        hidden: &[usize],
        obs: ObsModel,
        seed: u64,
    ) -> Result<Self> {
        let k = match kind {
            ModelKind::Lds => 1,
            ModelKind::Slds => k.max(2),
        };
        let mut rng = SeqRng::new(seed, 900);
        let mut enc_dims = vec![dx];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * d);
        let mut dec_dims = vec![d];
        dec_dims.extend_from_slice(hidden);
        dec_dims.push(dx);
        Ok(SvaeModel {
            kind,
            d,
            dx,
            k,
            encoder: DenseNet::new(&enc_dims, Activation::Gelu, true, &mut rng),
            decoder: DenseNet::new(&dec_dims, Activation::Gelu, true, &mut rng),
            obs,
            obs_log_var_u: Mat::from_element(dx, 1, crate::param_space::softplus_inv(0.5)),
            globals: GlobalPosterior::new(d, k, &mut rng)?,
            n_mc: 1,
            bp: BpMode::Sequential,
            mf_cfg: BlockUpdateConfig::default(),
        })
    }

    /// Per-step recognition potentials; masked steps get (0, 0).
    pub fn encode(&self, x: &Mat, mask: Option<&[bool]>) -> Result<Vec<(Vec64, Mat)>> {
        if x.ncols() != self.dx {
            return Err(SvaeError::ShapeMismatch(format!(
                "expected {} observation dims, got {}",
                self.dx,
                x.ncols()
            )));
        }
        if let Some(m) = mask {
            if m.len() != x.nrows() {
                return Err(SvaeError::ShapeMismatch("mask length".into()));
            }
        }
        let out = self.encoder.forward(x);
        let d = self.d;
        let mut recog = Vec::with_capacity(x.nrows());
        for t in 0..x.nrows() {
            let masked = mask.map(|m| m[t]).unwrap_or(false);
            if masked {
                recog.push((Vec64::zeros(d), Mat::zeros(d, d)));
            } else {
                let r = Vec64::from_fn(d, |i, _| out[(t, i)]);
                let diag =
                    Vec64::from_fn(d, |i, _| crate::param_space::softplus(out[(t, d + i)]));
                recog.push((r, Mat::from_diagonal(&diag)));
            }
        }
        Ok(recog)
    }

    /// Decode latent means to observation parameters (plain path).
    pub fn decode(&self, z: &Mat) -> Mat {
        self.decoder.forward(z)
    }

    pub fn obs_var(&self) -> Vec64 {
        Vec64::from_fn(self.dx, |i, _| {
            crate::param_space::softplus(self.obs_log_var_u[(i, 0)])
        })
    }

    /// Log-likelihood of a sequence given latent rows (plain path).
    pub fn log_likelihood(&self, z_rows: &Mat, x: &Mat) -> f64 {
        let params = self.decode(z_rows);
        let mut total = 0.0;
        match self.obs {
            ObsModel::Gaussian => {
                let var = self.obs_var();
                for t in 0..x.nrows() {
                    let xt = Vec64::from_fn(self.dx, |i, _| x[(t, i)]);
                    let mt = Vec64::from_fn(self.dx, |i, _| params[(t, i)]);
                    total += objective::gaussian_log_likelihood(&xt, &mt, &var);
                }
            }
            ObsModel::Gamma2 => {
                for t in 0..x.nrows() {
                    let xt = Vec64::from_fn(self.dx, |i, _| x[(t, i)]);
                    let lr = Vec64::from_fn(self.dx, |i, _| params[(t, i)]);
                    total += objective::gamma2_log_likelihood(&xt, &lr);
                }
            }
        }
        total
    }

    fn stats_for(&self, vae_stage: bool) -> Result<GlobalExpectedStats> {
        if vae_stage {
            Ok(standard_normal_globals(self.d))
        } else {
            self.globals.expected_stats()
        }
    }

    /// Posterior inference: closed form for the LDS, block updates for the SLDS.
    pub fn infer(&self, x: &Mat, mask: Option<&[bool]>) -> Result<InferState> {
        self.infer_with(x, mask, false, None)
    }

    fn infer_with(
        &self,
        x: &Mat,
        mask: Option<&[bool]>,
        vae_stage: bool,
        init_q: Option<Vec<Vec<f64>>>,
    ) -> Result<InferState> {
        let recog = self.encode(x, mask)?;
        let g = self.stats_for(vae_stage)?;
        if g.n_states() == 1 || vae_stage {
            let q = vec![vec![1.0]; x.nrows() - 1];
            let omega_z = meanfield::mf_to_continuous(&g, &q, &recog)?;
            let fr = crate::chain::kalman_filter(&omega_z)?;
            let sm = crate::chain::kalman_smooth(&omega_z, &fr)?;
            Ok(InferState {
                omega_z,
                stats: ChainStats::from_smooth(&sm, fr.log_z),
                mf: None,
            })
        } else {
            let st = meanfield::block_update_from(&g, &recog, &self.mf_cfg, None, init_q)?;
            Ok(InferState {
                omega_z: st.omega_z.clone(),
                stats: st.mu_z.clone(),
                mf: Some(st),
            })
        }
    }

    /// Full loss breakdown on one sequence (plain path, fixed seed).
    pub fn loss(&self, x: &Mat, mask: Option<&[bool]>, seed: u64) -> Result<LossBreakdown> {
        self.loss_with(x, mask, seed, false)
    }

    fn loss_with(
        &self,
        x: &Mat,
        mask: Option<&[bool]>,
        seed: u64,
        vae_stage: bool,
    ) -> Result<LossBreakdown> {
        let recog = self.encode(x, mask)?;
        let g = self.stats_for(vae_stage)?;
        let inf = self.infer_with(x, mask, vae_stage, None)?;
        let prior_kl = if vae_stage { 0.0 } else { self.globals.prior_kl()? };

        let (q_marg, local_k) = match &inf.mf {
            Some(st) => (
                st.mu_k.marginal.clone(),
                objective::local_kl_discrete(&st.mu_k, &st.omega_k),
            ),
            None => (vec![vec![1.0]; x.nrows() - 1], 0.0),
        };
        let local_z = objective::local_kl_structured(
            &recog,
            &inf.stats,
            objective::expected_prior_log_norm(&g, &q_marg),
        );
        let recog_dot = objective::recog_dot_stats(&recog, &inf.stats);

        // Monte-Carlo reconstruction through the plain sampler.
        let fr = crate::chain::kalman_filter(&inf.omega_z)?;
        let mut rng = SeqRng::new(seed, 301);
        let mut recon = 0.0;
        for _ in 0..self.n_mc.max(1) {
            let z = crate::chain::sample_posterior(&inf.omega_z, &fr, &mut rng)?;
            let z_rows = Mat::from_fn(x.nrows(), self.d, |t, i| z[t][i]);
            recon += self.log_likelihood(&z_rows, x);
        }
        recon /= self.n_mc.max(1) as f64;

        Ok(objective::breakdown(
            prior_kl, local_z, local_k, recon, recog_dot,
        ))
    }

    fn build_taped_model(
        &self,
        tape: &mut Tape,
        route: ParamRoute,
        vae_stage: bool,
    ) -> Result<TapedModel> {
        let enc_leaves = self.encoder.make_leaves(tape);
        let dec_leaves = self.decoder.make_leaves(tape);
        let obs_var_leaf = tape.leaf(self.obs_log_var_u.clone());

        if vae_stage {
            let g = standard_normal_globals(self.d);
            let globals = TapedGlobals::constants_from(tape, &g);
            return Ok(TapedModel {
                enc_leaves,
                dec_leaves,
                obs_var_leaf,
                niw: None,
                mniw: Vec::new(),
                pi0: None,
                pi_rows: Vec::new(),
                globals,
                prior_kl: None,
            });
        }

        let d = self.d;
        let niw_leaf = tape.leaf(self.globals.niw_u.clone());
        let niw = build_niw_factor(tape, niw_leaf, d, &self.globals.niw_prior, route)?;
        let mut mniw = Vec::with_capacity(self.k);
        for u in &self.globals.mniw_u {
            let leaf = tape.leaf(u.clone());
            mniw.push(build_mniw_factor(
                tape,
                leaf,
                d,
                d + 1,
                &self.globals.mniw_prior,
                route,
            )?);
        }
        let (pi0, pi_rows, log_pi0, log_pi) = if self.k > 1 {
            let prior = self.globals.pi_prior.as_ref().unwrap();
            let leaf = tape.leaf(self.globals.pi0_u.clone().unwrap());
            let pi0 = build_dirichlet_factor(tape, leaf, self.k, prior, route)?;
            let mut rows = Vec::with_capacity(self.k);
            let mut row_mus = Vec::with_capacity(self.k);
            for u in &self.globals.pi_u {
                let leaf = tape.leaf(u.clone());
                let f = build_dirichlet_factor(tape, leaf, self.k, prior, route)?;
                row_mus.push(tape.transpose(f.mu));
                rows.push(f);
            }
            let log_pi = tape.concat_rows(&row_mus);
            let log_pi0 = pi0.mu;
            (Some(pi0), rows, log_pi0, log_pi)
        } else {
            let z = tape.constant(Mat::zeros(1, 1));
            (None, Vec::new(), z, z)
        };

        let init = init_blocks_from_niw(tape, niw.mu, d);
        let trans = mniw
            .iter()
            .map(|f| trans_blocks_from_mniw(tape, f.mu, d))
            .collect();
        let globals = TapedGlobals {
            d,
            k: self.k,
            init,
            trans,
            log_pi0,
            log_pi,
        };

        // Prior KL over every factor.
        let mut prior_kl = niw.prior_kl;
        for f in &mniw {
            prior_kl = tape.add(prior_kl, f.prior_kl);
        }
        if let Some(p) = &pi0 {
            prior_kl = tape.add(prior_kl, p.prior_kl);
            for f in &pi_rows {
                prior_kl = tape.add(prior_kl, f.prior_kl);
            }
        }

        Ok(TapedModel {
            enc_leaves,
            dec_leaves,
            obs_var_leaf,
            niw: Some(niw),
            mniw,
            pi0,
            pi_rows,
            globals,
            prior_kl: Some(prior_kl),
        })
    }

    /// Taped recognition potentials from the encoder; masked steps become zero
    /// constants.
    fn taped_recog(
        &self,
        tape: &mut Tape,
        tm: &TapedModel,
        x: &Mat,
        mask: Option<&[bool]>,
    ) -> Vec<(VarId, VarId)> {
        let t_len = x.nrows();
        let d = self.d;
        let xid = tape.constant(x.clone());
        let enc_out = self.encoder.taped_forward(tape, xid, &tm.enc_leaves);
        let eye = tape.constant(Mat::identity(d, d));
        let mut recog = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let masked = mask.map(|m| m[t]).unwrap_or(false);
            if masked {
                let zr = tape.constant(Mat::zeros(d, 1));
                let zrr = tape.constant(Mat::zeros(d, d));
                recog.push((zr, zrr));
            } else {
                let r_row = tape.slice(enc_out, t, 0, 1, d);
                let r = tape.transpose(r_row);
                let raw_row = tape.slice(enc_out, t, d, 1, d);
                let raw = tape.transpose(raw_row);
                let diag = tape.softplus(raw);
                let diag_b = tape.broadcast_cols(diag, d);
                let rr = tape.mul(eye, diag_b);
                recog.push((r, rr));
            }
        }
        recog
    }

    /// Taped observation log-likelihood given stacked latent rows.
    fn taped_log_likelihood(
        &self,
        tape: &mut Tape,
        tm: &TapedModel,
        z_rows: VarId,
        x: &Mat,
    ) -> VarId {
        const LN_2PI: f64 = 1.837_877_066_409_345_3;
        let t_len = x.nrows();
        let params = self.decoder.taped_forward(tape, z_rows, &tm.dec_leaves);
        let xid = tape.constant(x.clone());
        match self.obs {
            ObsModel::Gaussian => {
                let var = tape.softplus(tm.obs_var_leaf); // Dx×1
                let var_row = tape.transpose(var);
                let var_b = tape.broadcast_rows(var_row, t_len);
                let diff = tape.sub(params, xid);
                let sq = tape.mul(diff, diff);
                let scaled = tape.div(sq, var_b);
                let s1 = tape.sum(scaled);
                let logv = tape.log(var);
                let s2_base = tape.sum(logv);
                let s2 = tape.scale(s2_base, t_len as f64);
                let s12 = tape.add(s1, s2);
                let half = tape.scale(s12, -0.5);
                tape.offset(half, -0.5 * (t_len * self.dx) as f64 * LN_2PI)
            }
            ObsModel::Gamma2 => {
                // log p = 2·logβ + log x - βx with β = exp(decoder output).
                let two_lr = tape.sum(params);
                let two_lr = tape.scale(two_lr, 2.0);
                let beta = tape.exp(params);
                let bx = tape.mul(beta, xid);
                let s = tape.sum(bx);
                let log_x_sum: f64 = x.iter().map(|v| v.ln()).sum();
                let d1 = tape.sub(two_lr, s);
                tape.offset(d1, log_x_sum)
            }
        }
    }

    /// Gradients of the ELBO for one sequence under the selected estimator.
    /// `mc_stream` seeds the reparameterization noise.
    pub fn sequence_gradients(
        &self,
        x: &Mat,
        mask: Option<&[bool]>,
        opts: &StepOptions,
        mc_stream: u64,
    ) -> Result<SequenceGradients> {
        {
            let bi = 0usize;
            let mask_ref = mask;
            // Plain forward: inner optimization to the fixed point (SLDS).
            let g_plain = self.stats_for(opts.vae_stage)?;
            let recog_plain = self.encode(x, mask_ref)?;
            let is_slds = g_plain.n_states() > 1 && !opts.vae_stage;
            let st = if is_slds {
                Some(meanfield::block_update(
                    &g_plain,
                    &recog_plain,
                    &self.mf_cfg,
                    None,
                )?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let tm = self.build_taped_model(&mut tape, opts.route, opts.vae_stage)?;
            let recog = self.taped_recog(&mut tape, &tm, x, mask_ref);
            let t_len = x.nrows();

            // Inner state graph.
            let (chain, chain_res, q_for_norm, local_k, g_graph, sweeps) = if let Some(st) = &st
            {
                if opts.grad_mode == GradMode::Unrolled {
                    // Tape the recorded sweeps end to end.
                    let k = self.k;
                    let uniform =
                        tape.constant(Mat::from_element(k, 1, 1.0 / k as f64));
                    let mut q: Vec<VarId> = vec![uniform; t_len - 1];
                    let mut last = None;
                    for _ in 0..st.iters {
                        let chain =
                            mf_to_continuous(&mut tape, &tm.globals, &q, &recog);
                        let chain_res = filter_smooth(&mut tape, &chain)?;
                        let hmm =
                            crate::diff::meanfield::mf_to_discrete(&mut tape, &tm.globals, &chain_res);
                        let hmm_res = taped_fb(&mut tape, &hmm)?;
                        q = hmm_res.marginal.clone();
                        last = Some((chain, chain_res, hmm, hmm_res));
                    }
                    let (chain, chain_res, hmm, hmm_res) = last.expect("sweeps >= 1");
                    let local_k =
                        taped_loss::local_kl_discrete(&mut tape, &hmm, &hmm_res);
                    (
                        chain,
                        chain_res,
                        hmm_res.marginal.clone(),
                        Some(local_k),
                        None,
                        st.iters,
                    )
                } else {
                    let graph = build_g_residual(
                        &mut tape,
                        &tm.globals,
                        &recog,
                        &st.omega_z,
                        &st.omega_k,
                    )?;
                    let chain_res = filter_smooth(&mut tape, &graph.new_chain)?;
                    let hmm_res = taped_fb(&mut tape, &graph.new_hmm)?;
                    let local_k =
                        taped_loss::local_kl_discrete(&mut tape, &graph.new_hmm, &hmm_res);
                    let chain = graph.new_chain.clone();
                    let q = graph.bp_hmm.marginal.clone();
                    (chain, chain_res, q, Some(local_k), Some(graph), st.iters)
                }
            } else {
                let ones: Vec<VarId> = (0..t_len - 1)
                    .map(|_| tape.constant(Mat::from_element(1, 1, 1.0)))
                    .collect();
                let chain = mf_to_continuous(&mut tape, &tm.globals, &ones, &recog);
                let chain_res = filter_smooth(&mut tape, &chain)?;
                (chain, chain_res, ones, None, None, 0)
            };

            let local_z = taped_loss::local_kl_continuous(
                &mut tape,
                &tm.globals,
                &recog,
                &chain_res,
                &q_for_norm,
            );
            let recog_dot = taped_loss::recog_dot_stats(&mut tape, &recog, &chain_res);

            // Reconstruction via reparameterized samples.
            let mut rng = SeqRng::new(opts.seed, 400 + mc_stream);
            let mut recon: Option<VarId> = None;
            for _ in 0..self.n_mc.max(1) {
                let z = taped_sample(&mut tape, &chain, &chain_res, &mut rng)?;
                let rows: Vec<VarId> = z.iter().map(|zt| tape.transpose(*zt)).collect();
                let z_rows = tape.concat_rows(&rows);
                let ll = self.taped_log_likelihood(&mut tape, &tm, z_rows, x);
                recon = Some(match recon {
                    Some(acc) => tape.add(acc, ll),
                    None => ll,
                });
            }
            let recon = {
                let r = recon.expect("n_mc >= 1");
                tape.scale(r, 1.0 / self.n_mc.max(1) as f64)
            };

            let elbo =
                taped_loss::objective_from_parts(&mut tape, tm.prior_kl, local_z, local_k, recon);

            // Pass A.
            let mut grads = tape.vjp(elbo, Mat::from_element(1, 1, 1.0))?;

            // Implicit correction (pass B).
            let mut stored = 1;
            if let Some(graph) = &g_graph {
                if opts.grad_mode == GradMode::Unrolled {
                    unreachable!();
                }
                if !opts.drop_correction {
                    let u = graph.gather(&grads);
                    let iters = match opts.grad_mode {
                        GradMode::NoSolve => 0,
                        GradMode::ImplicitFixedJ(j) => j,
                        GradMode::ImplicitCapped => sweeps,
                        GradMode::ImplicitCappedThreshold { residual_tol } => {
                            let res = st.as_ref().map(|s| s.residual).unwrap_or(0.0);
                            if res > residual_tol {
                                0
                            } else {
                                sweeps
                            }
                        }
                        GradMode::Unrolled => 0,
                    };
                    let w = richardson_solve(&tape, graph, &u, iters)?;
                    let n = graph.dim();
                    let seed_mat = Mat::from_column_slice(n, 1, &w);
                    let grads_b = tape.vjp(graph.residual, seed_mat)?;
                    for (slot, gb) in grads.iter_mut().zip(grads_b.into_iter()) {
                        if let Some(gbm) = gb {
                            match slot {
                                Some(a) => *a -= &gbm,
                                s => *s = Some(-gbm),
                            }
                        }
                    }
                }
            } else if opts.grad_mode == GradMode::Unrolled && st.is_some() {
                stored = sweeps;
            }
            if opts.grad_mode == GradMode::Unrolled {
                stored = sweeps.max(1);
            }

            // Gather into fixed-order accumulators.
            let net_ids = self.net_param_leaf_ids(&tm);
            let glob_ids = self.global_param_leaf_ids(&tm);
            let nets_this: Vec<Mat> = net_ids
                .iter()
                .map(|id| {
                    let v = tape.value(*id);
                    grad_or_zero(&grads, *id, v.nrows(), v.ncols())
                })
                .collect();
            let globs_this: Vec<Mat> = glob_ids
                .iter()
                .map(|id| {
                    let v = tape.value(*id);
                    grad_or_zero(&grads, *id, v.nrows(), v.ncols())
                })
                .collect();
            for m in nets_this.iter().chain(globs_this.iter()) {
                if !crate::linalg::is_finite_mat(m) {
                    return Err(SvaeError::NonFinite {
                        context: "sequence_gradients",
                        iter: bi,
                    });
                }
            }
            // Metrics from the tape values.
            let prior_kl_v = tm.prior_kl.map(|p| tape.scalar(p)).unwrap_or(0.0);
            let local_z_v = tape.scalar(local_z);
            let local_k_v = local_k.map(|l| tape.scalar(l)).unwrap_or(0.0);
            let recon_v = tape.scalar(recon);
            let recog_dot_v = tape.scalar(recog_dot);
            let bd = objective::breakdown(prior_kl_v, local_z_v, local_k_v, recon_v, recog_dot_v);
            Ok(SequenceGradients {
                loss: bd,
                net_grads: nets_this,
                global_grads: globs_this,
                forward_sweeps: sweeps,
                stored_states: stored,
            })
        }
    }

    /// One training step over a batch. Returns metrics; model is updated in
    /// place unless learning rates are zero.
    pub fn train_step(
        &mut self,
        batch: &[(Mat, Option<Vec<bool>>)],
        adam: &mut Adam,
        opts: &StepOptions,
    ) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(SvaeError::Domain("empty batch".into()));
        }
        let b = batch.len() as f64;

        let mut net_grads: Option<Vec<Mat>> = None;
        let mut glob_grads: Option<Vec<Mat>> = None;
        let mut loss_acc = LossBreakdown {
            prior_kl: 0.0,
            local_kl_continuous: 0.0,
            local_kl_discrete: 0.0,
            reconstruction: 0.0,
            elbo: 0.0,
            surrogate: 0.0,
        };
        let mut sweeps_acc = 0;
        let mut stored_acc = 0;

        for (bi, (x, mask)) in batch.iter().enumerate() {
            let sg = self.sequence_gradients(x, mask.as_deref(), opts, bi as u64)?;
            match &mut net_grads {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&sg.net_grads) {
                        *a += g;
                    }
                }
                slot => *slot = Some(sg.net_grads),
            }
            match &mut glob_grads {
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&sg.global_grads) {
                        *a += g;
                    }
                }
                slot => *slot = Some(sg.global_grads),
            }
            loss_acc.prior_kl += sg.loss.prior_kl;
            loss_acc.local_kl_continuous += sg.loss.local_kl_continuous;
            loss_acc.local_kl_discrete += sg.loss.local_kl_discrete;
            loss_acc.reconstruction += sg.loss.reconstruction;
            loss_acc.elbo += sg.loss.elbo;
            loss_acc.surrogate += sg.loss.surrogate;
            sweeps_acc += sg.forward_sweeps;
            stored_acc = stored_acc.max(sg.stored_states);
        }

        // Average.
        let mut net_grads = net_grads.unwrap();
        let mut glob_grads = glob_grads.unwrap();
        for g in net_grads.iter_mut().chain(glob_grads.iter_mut()) {
            *g /= b;
        }
        loss_acc.prior_kl /= b;
        loss_acc.local_kl_continuous /= b;
        loss_acc.local_kl_discrete /= b;
        loss_acc.reconstruction /= b;
        loss_acc.elbo /= b;
        loss_acc.surrogate /= b;

        let grad_norm_nets = net_grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt();
        let grad_norm_globals = glob_grads
            .iter()
            .map(|g| g.norm_squared())
            .sum::<f64>()
            .sqrt();

        // Updates: Adam minimizes -ELBO; natural ascent on the globals.
        if opts.update_nets && opts.adam_lr > 0.0 {
            let neg: Vec<Mat> = net_grads.iter().map(|g| -g).collect();
            let mut params = self.net_params_mut();
            adam.step(&mut params, &neg);
        }
        if opts.update_globals && opts.nat_lr > 0.0 && !opts.vae_stage {
            // Trust-region cap: the raw direction scales with the per-sequence
            // statistics (O(T)), and an overshoot past the conjugate target
            // amplifies through the inverse-bijector factors near the
            // constraint boundary.
            self.nat_step_globals(&glob_grads, opts.nat_lr);
        }

        Ok(StepMetrics {
            loss: loss_acc,
            grad_norm_nets,
            grad_norm_globals,
            forward_sweeps: sweeps_acc / batch.len(),
            stored_states: stored_acc,
        })
    }

    fn net_param_leaf_ids(&self, tm: &TapedModel) -> Vec<VarId> {
        let mut ids = Vec::new();
        for (w, b) in &tm.enc_leaves {
            ids.push(*w);
            ids.push(*b);
        }
        for (w, b) in &tm.dec_leaves {
            ids.push(*w);
            ids.push(*b);
        }
        ids.push(tm.obs_var_leaf);
        ids
    }

    fn global_param_leaf_ids(&self, tm: &TapedModel) -> Vec<VarId> {
        let mut ids = Vec::new();
        if let Some(f) = &tm.niw {
            ids.push(f.unconstrained);
        }
        for f in &tm.mniw {
            ids.push(f.unconstrained);
        }
        if let Some(f) = &tm.pi0 {
            ids.push(f.unconstrained);
        }
        for f in &tm.pi_rows {
            ids.push(f.unconstrained);
        }
        ids
    }

    fn net_params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        for l in &mut self.decoder.layers {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.obs_log_var_u);
        out
    }

    /// Apply a natural-gradient ascent step (with the trust-region cap) to the
    /// global unconstrained parameters; gradient order matches
    /// [`SequenceGradients::global_grads`].
    pub fn nat_step_globals(&mut self, grads: &[Mat], lr: f64) {
        const STEP_CAP: f64 = 1.0;
        let mut params = self.global_params_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            let delta = g * lr;
            let inf_norm = delta.amax();
            let scale = if inf_norm > STEP_CAP { STEP_CAP / inf_norm } else { 1.0 };
            **p += delta * scale;
        }
    }

    /// Apply a first-order (Adam) descent step on -ELBO to the global
    /// unconstrained parameters (the non-natural baseline).
    pub fn adam_step_globals(&mut self, adam: &mut Adam, grads: &[Mat]) {
        let neg: Vec<Mat> = grads.iter().map(|g| -g).collect();
        let mut params = self.global_params_mut();
        adam.step(&mut params, &neg);
    }

    fn global_params_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = Vec::new();
        out.push(&mut self.globals.niw_u);
        for u in &mut self.globals.mniw_u {
            out.push(u);
        }
        if let Some(p) = &mut self.globals.pi0_u {
            out.push(p);
        }
        for u in &mut self.globals.pi_u {
            out.push(u);
        }
        out
    }

    /// Seed the per-state MNIW posteriors (and the NIW initial factor) from
    /// encoder outputs: each state takes a conjugate update on the smoothed
    /// pair-statistics of a random window of a random sequence, so states
    /// start as specialists of actual data segments at the data's own noise
    /// scale. Run at the stage-1 to stage-2 boundary.
    pub fn seed_states_from_encoder(&mut self, dataset: &[Mat], seed: u64) -> Result<()> {
        let d = self.d;
        let g = standard_normal_globals(d);
        let mut rng = SeqRng::new(seed, 700);

        // Smoothed stats per sequence under the stage-1 posterior.
        let mut stats_cache: Vec<Option<ChainStats>> = vec![None; dataset.len()];
        let stats_for = |s: usize,
                             model: &SvaeModel,
                             cache: &mut Vec<Option<ChainStats>>|
         -> Result<ChainStats> {
            if cache[s].is_none() {
                let recog = model.encode(&dataset[s], None)?;
                let q = vec![vec![1.0]; dataset[s].nrows() - 1];
                let omega = meanfield::mf_to_continuous(&g, &q, &recog)?;
                let fr = crate::chain::kalman_filter(&omega)?;
                let sm = crate::chain::kalman_smooth(&omega, &fr)?;
                cache[s] = Some(ChainStats::from_smooth(&sm, fr.log_z));
            }
            Ok(cache[s].clone().unwrap())
        };

        // NIW initial factor: conjugate update on every sequence's first step.
        let mut niw_eta = self.globals.niw_prior.clone();
        for s in 0..dataset.len() {
            let st = stats_for(s, self, &mut stats_cache)?;
            let mut at = 0;
            for i in 0..d {
                for j in 0..d {
                    niw_eta.data[at] += st.second[0][(i, j)];
                    at += 1;
                }
            }
            for i in 0..d {
                niw_eta.data[at] += st.mean[0][i];
                at += 1;
            }
            niw_eta.data[at] += 1.0;
            niw_eta.data[at + 1] += 1.0;
        }
        self.globals.niw_u = Mat::from_column_slice(
            self.globals.niw_u.nrows(),
            1,
            &Self::niw_unconstrained_from_eta(&niw_eta, d)?,
        );

        // Per-state MNIW factors from windows stratified across sequences and
        // positions, so different states see different data segments.
        let k = self.k;
        for state in 0..k {
            let s = state % dataset.len();
            let st = stats_for(s, self, &mut stats_cache)?;
            let t_len = dataset[s].nrows();
            let window = (t_len / 5).max(10).min(t_len - 1);
            let span = t_len - 1 - window;
            let frac = if k > 1 {
                (state / dataset.len().min(k)) as f64 / ((k as f64 / dataset.len().min(k) as f64).ceil()).max(1.0)
            } else {
                0.0
            };
            let jitter = rng.uniform() * window as f64 * 0.5;
            let start = ((frac * span as f64 + jitter) as usize).min(span);
            let mut eta = self.globals.mniw_prior.clone();
            let ridge = 1e-4;
            for t in start..start + window {
                // T(z, z') = (z'z'ᵀ, z'[z;1]ᵀ, [z;1][z;1]ᵀ, 1) evaluated at the
                // smoothed means (point statistics): the stage-1 posterior has
                // temporally uncorrelated variance that would otherwise swamp
                // the mean trajectory's dynamics signal. A small ridge keeps
                // the window Gram matrices SPD.
                let mu0 = &st.mean[t];
                let mu1 = &st.mean[t + 1];
                let mut at = 0;
                for i in 0..d {
                    for j in 0..d {
                        eta.data[at] += mu1[i] * mu1[j] + ridge * ((i == j) as u8 as f64);
                        at += 1;
                    }
                }
                for i in 0..d {
                    for j in 0..d {
                        eta.data[at + i * (d + 1) + j] += mu1[i] * mu0[j];
                    }
                    eta.data[at + i * (d + 1) + d] += mu1[i];
                }
                let m = d + 1;
                let base = d * d + d * m;
                for i in 0..d {
                    for j in 0..d {
                        eta.data[base + i * m + j] += mu0[i] * mu0[j] + ridge * ((i == j) as u8 as f64);
                    }
                    eta.data[base + i * m + d] += mu0[i];
                    eta.data[base + d * m + i] += mu0[i];
                }
                eta.data[base + d * m + d] += 1.0;
                eta.data[base + m * m] += 1.0;
            }
            self.globals.mniw_u[state] = Mat::from_column_slice(
                self.globals.mniw_u[state].nrows(),
                1,
                &Self::mniw_unconstrained_from_eta(&eta, d)?,
            );
        }
        Ok(())
    }

    fn niw_unconstrained_from_eta(eta: &NaturalParams, d: usize) -> Result<Vec<f64>> {
        match expfam::natural_to_canonical(eta)? {
            expfam::Canonical::Niw { s, m, lambda, nu } => {
                let spd = Bijector::SpdCorrelationCholesky { n: d };
                let mut u = spd.inverse(s.transpose().as_slice())?;
                u.extend(m.iter());
                u.push(crate::param_space::softplus_inv(lambda));
                u.push(crate::param_space::softplus_inv(
                    (nu - Self::nu_shift_pub(d)).max(1e-6),
                ));
                Ok(u)
            }
            _ => Err(SvaeError::FamilyMismatch("expected NIW".into())),
        }
    }

    fn mniw_unconstrained_from_eta(eta: &NaturalParams, d: usize) -> Result<Vec<f64>> {
        match expfam::natural_to_canonical(eta)? {
            expfam::Canonical::Mniw { s, m, v, nu } => {
                let spd_d = Bijector::SpdCorrelationCholesky { n: d };
                let spd_m = Bijector::SpdCorrelationCholesky { n: d + 1 };
                let mut u = spd_d.inverse(s.transpose().as_slice())?;
                for i in 0..d {
                    for j in 0..=d {
                        u.push(m[(i, j)]);
                    }
                }
                u.extend(spd_m.inverse(v.transpose().as_slice())?);
                u.push(crate::param_space::softplus_inv(
                    (nu - Self::nu_shift_pub(d)).max(1e-6),
                ));
                Ok(u)
            }
            _ => Err(SvaeError::FamilyMismatch("expected MNIW".into())),
        }
    }

    fn nu_shift_pub(d: usize) -> f64 {
        GlobalPosterior::nu_shift(d)
    }

    /// Impute missing steps: posterior means plus sampled reconstructions.
    pub fn impute(
        &self,
        x: &Mat,
        mask: &[bool],
        n_samples: usize,
        seed: u64,
    ) -> Result<ImputeResult> {
        let init_q = if self.k > 1 {
            Some(self.bridge_init(x, mask, seed)?)
        } else {
            None
        };
        let inf = self.infer_with(x, Some(mask), false, init_q)?;
        let t_len = x.nrows();
        let mean_rows = Mat::from_fn(t_len, self.d, |t, i| inf.stats.mean[t][i]);
        let means = self.decode(&mean_rows);

        let fr = crate::chain::kalman_filter(&inf.omega_z)?;
        let mut rng = SeqRng::new(seed, 500);
        let mut samples = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let z = crate::chain::sample_posterior(&inf.omega_z, &fr, &mut rng)?;
            let rows = Mat::from_fn(t_len, self.d, |t, i| z[t][i]);
            samples.push(self.decode(&rows));
        }
        Ok(ImputeResult {
            means,
            samples,
            state: inf,
        })
    }

    /// Discrete-state initialization for imputation: infer on the masked
    /// problem once, sample states at the boundaries of each masked segment,
    /// and fill the inside by bridge sampling from E[log π].
    fn bridge_init(&self, x: &Mat, mask: &[bool], seed: u64) -> Result<Vec<Vec<f64>>> {
        let g = self.globals.expected_stats()?;
        let recog = self.encode(x, Some(mask))?;
        let st = meanfield::block_update(&g, &recog, &self.mf_cfg, None)?;
        let t_len = x.nrows();
        let k = self.k;
        let mut rng = SeqRng::new(seed, 501);

        // Discrete index tk corresponds to the transition (z_{tk}, z_{tk+1}).
        let tk_masked = |tk: usize| mask[tk] || mask[tk + 1];
        let mut q = st.mu_k.marginal.clone();
        let mut tk = 0;
        while tk < t_len - 1 {
            if !tk_masked(tk) {
                tk += 1;
                continue;
            }
            let seg_start = tk;
            let mut seg_end = tk;
            while seg_end + 1 < t_len - 1 && tk_masked(seg_end + 1) {
                seg_end += 1;
            }
            // Sample boundary states from the adjacent observed factors (or
            // the prior at the sequence edges).
            let start_state = if seg_start > 0 {
                rng.categorical(&q[seg_start - 1])
            } else {
                let probs: Vec<f64> = g.log_pi0.iter().map(|l| l.exp()).collect();
                rng.categorical(&probs)
            };
            let end_state = if seg_end + 1 < t_len - 1 {
                Some(rng.categorical(&q[seg_end + 1]))
            } else {
                None
            };
            // Bridge: forward sampling conditioned on the end state via
            // log-space backward messages m_t(k) = log (A^{steps})_{k, end}.
            let len = seg_end - seg_start + 1;
            let mut back = vec![vec![0.0; k]; len + 1];
            if let Some(end) = end_state {
                for (i, b) in back[len].iter_mut().enumerate() {
                    *b = if i == end { 0.0 } else { f64::NEG_INFINITY };
                }
                for s in (0..len).rev() {
                    for i in 0..k {
                        let row: Vec<f64> = (0..k)
                            .map(|j| g.log_pi[(i, j)] + back[s + 1][j])
                            .collect();
                        back[s][i] = crate::expfam::special::logsumexp(&row);
                    }
                }
            }
            let mut prev = start_state;
            for (s, slot) in (seg_start..=seg_end).enumerate() {
                let weights: Vec<f64> = (0..k)
                    .map(|j| (g.log_pi[(prev, j)] + back[s + 1][j]).exp())
                    .collect();
                let total: f64 = weights.iter().sum();
                let drawn = if total > 0.0 && total.is_finite() {
                    rng.categorical(&weights)
                } else {
                    prev
                };
                let mut row = vec![1e-6; k];
                row[drawn] = 1.0 - 1e-6 * (k as f64 - 1.0);
                q[slot] = row;
                prev = drawn;
            }
            tk = seg_end + 1;
        }
        Ok(q)
    }

    /// Save every parameter to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = BTreeMap::new();
        let meta = vec![
            match self.kind {
                ModelKind::Lds => 0.0,
                ModelKind::Slds => 1.0,
            },
            self.d as f64,
            self.dx as f64,
            self.k as f64,
            match self.obs {
                ObsModel::Gaussian => 0.0,
                ObsModel::Gamma2 => 1.0,
            },
            self.encoder.layers.len() as f64,
            self.decoder.layers.len() as f64,
            self.n_mc as f64,
        ];
        tensors.insert("meta".into(), Mat::from_row_slice(1, meta.len(), &meta));
        for (i, l) in self.encoder.layers.iter().enumerate() {
            tensors.insert(format!("enc.{i}.w"), l.w.clone());
            tensors.insert(format!("enc.{i}.b"), l.b.clone());
        }
        for (i, l) in self.decoder.layers.iter().enumerate() {
            tensors.insert(format!("dec.{i}.w"), l.w.clone());
            tensors.insert(format!("dec.{i}.b"), l.b.clone());
        }
        tensors.insert("obs_log_var".into(), self.obs_log_var_u.clone());
        tensors.insert("niw_u".into(), self.globals.niw_u.clone());
        for (i, u) in self.globals.mniw_u.iter().enumerate() {
            tensors.insert(format!("mniw_u.{i}"), u.clone());
        }
        if let Some(p) = &self.globals.pi0_u {
            tensors.insert("pi0_u".into(), p.clone());
        }
        for (i, u) in self.globals.pi_u.iter().enumerate() {
            tensors.insert(format!("pi_u.{i}"), u.clone());
        }
        checkpoint::write_checkpoint(path, &tensors)
    }

    /// Restore parameters from a checkpoint into a model with matching shape.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let tensors = checkpoint::read_checkpoint(path)?;
        let get = |name: &str| -> Result<&Mat> {
            tensors
                .get(name)
                .ok_or_else(|| SvaeError::Length(format!("checkpoint missing tensor {name}")))
        };
        for (i, l) in self.encoder.layers.iter_mut().enumerate() {
            l.w = get(&format!("enc.{i}.w"))?.clone();
            l.b = get(&format!("enc.{i}.b"))?.clone();
        }
        for (i, l) in self.decoder.layers.iter_mut().enumerate() {
            l.w = get(&format!("dec.{i}.w"))?.clone();
            l.b = get(&format!("dec.{i}.b"))?.clone();
        }
        self.obs_log_var_u = get("obs_log_var")?.clone();
        self.globals.niw_u = get("niw_u")?.clone();
        for (i, u) in self.globals.mniw_u.iter_mut().enumerate() {
            *u = get(&format!("mniw_u.{i}"))?.clone();
        }
        if self.globals.pi0_u.is_some() {
            self.globals.pi0_u = Some(get("pi0_u")?.clone());
            for (i, u) in self.globals.pi_u.iter_mut().enumerate() {
                *u = get(&format!("pi_u.{i}"))?.clone();
            }
        }
        Ok(())
    }
}

pub struct ImputeResult {
    pub means: Mat,
    pub samples: Vec<Mat>,
    pub state: InferState,
}

/// Three-stage training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub stage1_frac: f64,
    pub stage2_frac: f64,
    pub adam_lr: f64,
    pub nat_lr: f64,
    pub grad_mode: GradMode,
    pub drop_correction: bool,
    pub route: ParamRoute,
    pub seed: u64,
    /// Directory for per-stage checkpoints; none to skip.
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            batch: 4,
            stage1_frac: 0.1,
            stage2_frac: 0.2,
            adam_lr: 3e-3,
            nat_lr: 0.05,
            grad_mode: GradMode::ImplicitCappedThreshold {
                residual_tol: crate::gradients::DEFAULT_RESIDUAL_TOL,
            },
            drop_correction: false,
            route: ParamRoute::Natural,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    VaePretrain,
    GraphicalFit,
    Joint,
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: TrainStage,
    pub metrics: StepMetrics,
    pub wall_ms: f64,
}

/// Three-stage training: VAE pretraining with a standard-normal prior, then
/// graphical-model fitting with frozen networks, then joint refinement.
pub fn train(
    model: &mut SvaeModel,
    dataset: &[Mat],
    cfg: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    if dataset.is_empty() {
        return Err(SvaeError::Domain("empty dataset".into()));
    }
    let s1_end = (cfg.steps as f64 * cfg.stage1_frac).ceil() as usize;
    let s2_end = s1_end + (cfg.steps as f64 * cfg.stage2_frac).ceil() as usize;
    let mut adam = Adam::new(cfg.adam_lr);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let stage = if step < s1_end {
            TrainStage::VaePretrain
        } else if step < s2_end {
            TrainStage::GraphicalFit
        } else {
            TrainStage::Joint
        };
        // Entering stage 2: seed the global posterior from encoder statistics.
        if step == s1_end && s1_end > 0 && model.k > 1 {
            model.seed_states_from_encoder(dataset, cfg.seed)?;
        }
        // Deterministic round-robin batch selection.
        let mut batch = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let idx = (step * cfg.batch + i) % dataset.len();
            batch.push((dataset[idx].clone(), None));
        }
        let opts = StepOptions {
            adam_lr: cfg.adam_lr,
            nat_lr: cfg.nat_lr,
            grad_mode: cfg.grad_mode,
            drop_correction: cfg.drop_correction,
            vae_stage: stage == TrainStage::VaePretrain,
            route: cfg.route,
            update_nets: stage != TrainStage::GraphicalFit,
            update_globals: stage != TrainStage::VaePretrain,
            seed: cfg.seed.wrapping_add(step as u64),
        };
        let t0 = std::time::Instant::now();
        let metrics = model.train_step(&batch, &mut adam, &opts)?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        log.push(TrainRecord {
            step,
            stage,
            metrics,
            wall_ms,
        });

        if let Some(dir) = &cfg.checkpoint_dir {
            let boundary = step + 1 == s1_end || step + 1 == s2_end || step + 1 == cfg.steps;
            if boundary {
                std::fs::create_dir_all(dir)?;
                let name = match stage {
                    TrainStage::VaePretrain => "stage1.ckpt",
                    TrainStage::GraphicalFit => "stage2.ckpt",
                    TrainStage::Joint => "stage3.ckpt",
                };
                model.save(&dir.join(name))?;
            }
        }
    }
    Ok(log)
}
