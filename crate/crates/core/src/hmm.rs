//! Log-space forward-backward for the discrete chain.
//!
//! Inputs are expected log-parameters E[log π₀], E[log π] plus per-step
//! mean-field potentials; everything runs through logsumexp so -inf entries
//! (impossible states) are handled. When embedded in the switching model the
//! discrete chain has one state per continuous transition (length T-1); this
//! module is indexing-agnostic.

use nalgebra::DMatrix;

use crate::error::{Result, SvaeError};
use crate::expfam::special::logsumexp;
use crate::linalg::Mat;

/// Potentials of the discrete chain.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmPotentials {
    /// E[log π_k] for the initial state, length K.
    pub log_pi0: Vec<f64>,
    /// E[log π_ij], K×K (row i: from-state, column j: to-state).
    pub log_pi: Mat,
    /// Per-step potentials obs[t][k], length Tk.
    pub obs: Vec<Vec<f64>>,
}

impl HmmPotentials {
    pub fn k(&self) -> usize {
        self.log_pi0.len()
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.obs.is_empty() {
            return Err(SvaeError::DimMismatch("HMM needs K >= 1, Tk >= 1".into()));
        }
        if self.log_pi.nrows() != k || self.log_pi.ncols() != k {
            return Err(SvaeError::DimMismatch("HMM transition shape".into()));
        }
        for o in &self.obs {
            if o.len() != k {
                return Err(SvaeError::DimMismatch("HMM obs row length".into()));
            }
        }
        // NaN/inf guard: -inf is allowed (impossible state), +inf/NaN is not.
        let bad = |x: &f64| x.is_nan() || *x == f64::INFINITY;
        if self.log_pi0.iter().any(bad)
            || self.log_pi.iter().any(bad)
            || self.obs.iter().flatten().any(bad)
        {
            return Err(SvaeError::Domain("HMM potentials must not be NaN/+inf".into()));
        }
        Ok(())
    }
}

/// Posterior marginals and log partition function.
#[derive(Debug, Clone)]
pub struct HmmMarginals {
    /// log(α_t + β_t), unnormalized log marginals.
    pub log_marginal: Vec<Vec<f64>>,
    /// Normalized marginals, each row sums to 1.
    pub marginal: Vec<Vec<f64>>,
    pub log_z: f64,
}

/// Forward-backward in log space.
pub fn forward_backward(p: &HmmPotentials) -> Result<HmmMarginals> {
    p.check()?;
    let k = p.k();
    let tk = p.len();

    // Forward: α_1(k) = E[log π_k] + obs_1(k);
    // α_t(k) = obs_t(k) + logsumexp_i [E[log π_ik] + α_{t-1}(i)].
    let mut alpha = vec![vec![0.0; k]; tk];
    for j in 0..k {
        alpha[0][j] = p.log_pi0[j] + p.obs[0][j];
    }
    let mut scratch = vec![0.0; k];
    for t in 1..tk {
        for j in 0..k {
            for i in 0..k {
                scratch[i] = p.log_pi[(i, j)] + alpha[t - 1][i];
            }
            alpha[t][j] = p.obs[t][j] + logsumexp(&scratch);
        }
    }
    let log_z = logsumexp(&alpha[tk - 1]);
    if log_z == f64::NEG_INFINITY {
        return Err(SvaeError::Degenerate(
            "all HMM paths have zero probability".into(),
        ));
    }

    // Backward: β_T = 0; β_t(k) = logsumexp_j [obs_{t+1}(j) + E[log π_kj] + β_{t+1}(j)].
    let mut beta = vec![vec![0.0; k]; tk];
    for t in (0..tk - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                scratch[j] = p.obs[t + 1][j] + p.log_pi[(i, j)] + beta[t + 1][j];
            }
            beta[t][i] = logsumexp(&scratch);
        }
    }

    let mut log_marginal = vec![vec![0.0; k]; tk];
    let mut marginal = vec![vec![0.0; k]; tk];
    for t in 0..tk {
        for j in 0..k {
            log_marginal[t][j] = alpha[t][j] + beta[t][j];
        }
        let norm = logsumexp(&log_marginal[t]);
        if norm == f64::NEG_INFINITY {
            return Err(SvaeError::Degenerate(format!(
                "all states impossible at step {t}"
            )));
        }
        for j in 0..k {
            marginal[t][j] = (log_marginal[t][j] - norm).exp();
        }
    }

    Ok(HmmMarginals {
        log_marginal,
        marginal,
        log_z,
    })
}

/// Brute-force path enumeration; the oracle for small K and Tk.
pub fn enumerate_oracle(p: &HmmPotentials) -> Result<HmmMarginals> {
    p.check()?;
    let k = p.k();
    let tk = p.len();
    let total_paths = k.pow(tk as u32);
    let mut log_weights = Vec::with_capacity(total_paths);
    let mut path = vec![0usize; tk];
    for code in 0..total_paths {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        let mut lw = p.log_pi0[path[0]] + p.obs[0][path[0]];
        for t in 1..tk {
            lw += p.log_pi[(path[t - 1], path[t])] + p.obs[t][path[t]];
        }
        log_weights.push(lw);
    }
    let log_z = logsumexp(&log_weights);
    let mut marginal = vec![vec![0.0; k]; tk];
    for (code, lw) in log_weights.iter().enumerate() {
        let w = (lw - log_z).exp();
        let mut c = code;
        for t in 0..tk {
            marginal[t][c % k] += w;
            c /= k;
        }
    }
    let log_marginal = marginal
        .iter()
        .map(|row| row.iter().map(|m| m.ln() + log_z).collect())
        .collect();
    Ok(HmmMarginals {
        log_marginal,
        marginal,
        log_z,
    })
}

/// Random finite potentials for tests.
pub fn random_hmm(k: usize, tk: usize, rng: &mut crate::rng::SeqRng) -> HmmPotentials {
    HmmPotentials {
        log_pi0: (0..k).map(|_| rng.normal()).collect(),
        log_pi: DMatrix::from_fn(k, k, |_, _| rng.normal()),
        obs: (0..tk)
            .map(|_| (0..k).map(|_| rng.normal() * 2.0).collect())
            .collect(),
    }
}
