//! Taped mirror of the log-space forward-backward pass.

use crate::error::Result;
use crate::hmm::HmmPotentials;

use super::tape::{Tape, VarId};

/// Discrete-chain potentials as tape variables: log_pi0 and each obs row are
/// K×1 columns, log_pi is K×K.
#[derive(Debug, Clone)]
pub struct TapedHmm {
    pub k: usize,
    pub log_pi0: VarId,
    pub log_pi: VarId,
    pub obs: Vec<VarId>,
}

impl TapedHmm {
    pub fn leaves_from(tape: &mut Tape, p: &HmmPotentials) -> Self {
        let k = p.k();
        let log_pi0 = tape.leaf(nalgebra::DMatrix::from_fn(k, 1, |i, _| p.log_pi0[i]));
        let log_pi = tape.leaf(p.log_pi.clone());
        let obs = p
            .obs
            .iter()
            .map(|row| tape.leaf(nalgebra::DMatrix::from_fn(k, 1, |i, _| row[i])))
            .collect();
        TapedHmm {
            k,
            log_pi0,
            log_pi,
            obs,
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TapedHmmResult {
    pub log_z: VarId,
    /// Normalized marginals, K×1 per step.
    pub marginal: Vec<VarId>,
}

/// Taped forward-backward.
pub fn forward_backward(tape: &mut Tape, p: &TapedHmm) -> Result<TapedHmmResult> {
    let k = p.k;
    let tk = p.len();

    // Forward.
    let mut alpha = Vec::with_capacity(tk);
    alpha.push(tape.add(p.log_pi0, p.obs[0]));
    for t in 1..tk {
        let prev_bc = tape.broadcast_cols(alpha[t - 1], k); // (i,j): α_{t-1}(i)
        let m = tape.add(p.log_pi, prev_bc);
        let lse = tape.logsumexp_cols(m); // 1×K over i
        let lse_col = tape.transpose(lse);
        alpha.push(tape.add(p.obs[t], lse_col));
    }
    let log_z = tape.logsumexp_all(alpha[tk - 1]);

    // Backward.
    let mut beta = vec![tape.constant(nalgebra::DMatrix::zeros(k, 1)); tk];
    for t in (0..tk - 1).rev() {
        let ob = tape.add(p.obs[t + 1], beta[t + 1]);
        let ob_row = tape.transpose(ob); // 1×K
        let ob_bc = tape.broadcast_rows(ob_row, k); // (i,j): (obs+β)_j
        let n = tape.add(p.log_pi, ob_bc);
        beta[t] = tape.logsumexp_rows(n); // K×1 over j
    }

    let mut marginal = Vec::with_capacity(tk);
    for t in 0..tk {
        let lm = tape.add(alpha[t], beta[t]);
        let norm = tape.logsumexp_all(lm);
        let shifted = tape.sub(lm, norm);
        marginal.push(tape.exp(shifted));
    }

    Ok(TapedHmmResult { log_z, marginal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::tape::grad_of;
    use crate::hmm::{forward_backward as plain_fb, random_hmm};
    use crate::rng::SeqRng;
    use nalgebra::DMatrix;

    #[test]
    fn taped_matches_plain() {
        let mut rng = SeqRng::new(110, 0);
        for (k, tk) in [(2usize, 3usize), (3, 5), (4, 2), (1, 4)] {
            let p = random_hmm(k, tk, &mut rng);
            let want = plain_fb(&p).unwrap();
            let mut tape = Tape::new();
            let tp = TapedHmm::leaves_from(&mut tape, &p);
            let res = forward_backward(&mut tape, &tp).unwrap();
            assert!((tape.scalar(res.log_z) - want.log_z).abs() < 1e-12);
            for t in 0..tk {
                let m = tape.value(res.marginal[t]);
                for j in 0..k {
                    assert!((m[(j, 0)] - want.marginal[t][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_z_gradient_gives_marginals() {
        // ∂logZ/∂obs_t(k) = marginal q(k_t = k).
        let mut rng = SeqRng::new(111, 0);
        let p = random_hmm(3, 4, &mut rng);
        let want = plain_fb(&p).unwrap();
        let mut tape = Tape::new();
        let tp = TapedHmm::leaves_from(&mut tape, &p);
        let res = forward_backward(&mut tape, &tp).unwrap();
        let grads = tape
            .vjp(res.log_z, DMatrix::from_element(1, 1, 1.0))
            .unwrap();
        for t in 0..4 {
            let g = grad_of(&grads, tp.obs[t]);
            for j in 0..3 {
                assert!(
                    (g[(j, 0)] - want.marginal[t][j]).abs() < 1e-10,
                    "t={t} j={j}"
                );
            }
        }
    }

    #[test]
    fn marginal_gradient_matches_finite_differences() {
        let mut rng = SeqRng::new(112, 0);
        let p = random_hmm(2, 3, &mut rng);
        let mut tape = Tape::new();
        let tp = TapedHmm::leaves_from(&mut tape, &p);
        let res = forward_backward(&mut tape, &tp).unwrap();
        // Scalar: q(k_2 = 0)².
        let m = res.marginal[1];
        let sq = tape.mul(m, m);
        let first = tape.slice(sq, 0, 0, 1, 1);
        let grads = tape.vjp(first, DMatrix::from_element(1, 1, 1.0)).unwrap();
        let g = grad_of(&grads, tp.obs[0]);

        let h = 1e-6;
        let eval = |delta: f64| -> f64 {
            let mut pp = p.clone();
            pp.obs[0][0] += delta;
            let r = plain_fb(&pp).unwrap();
            r.marginal[1][0] * r.marginal[1][0]
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((g[(0, 0)] - fd).abs() < 1e-7, "{} vs {}", g[(0, 0)], fd);
    }
}
