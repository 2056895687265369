//! Inference oracle suite: the sequential chain filter/smoother against the
//! dense joint-Gaussian oracle, and HMM marginals against path enumeration.

use svae_core::chain::{dense_oracle, kalman_filter, kalman_smooth, random_chain};
use svae_core::hmm::{enumerate_oracle, forward_backward, random_hmm};
use svae_core::linalg;
use svae_core::rng::SeqRng;

#[test]
fn chain_matches_dense_oracle_across_instances() {
    let mut rng = SeqRng::new(200, 0);
    let mut count = 0;
    while count < 200 {
        let t = 1 + (rng.uniform() * 6.0) as usize;
        let d = 1 + (rng.uniform() * 3.0) as usize;
        let p = random_chain(t.min(6), d.min(3), &mut rng);
        let fr = kalman_filter(&p).unwrap();
        let sm = kalman_smooth(&p, &fr).unwrap();
        let oracle = dense_oracle(&p).unwrap();
        assert!(
            (fr.log_z - oracle.log_z).abs() < 1e-8,
            "instance {count}: logZ {} vs {}",
            fr.log_z,
            oracle.log_z
        );
        for i in 0..p.len() {
            assert!(linalg::max_abs_diff_vec(&sm.mean[i], &oracle.mean[i]) < 1e-8);
            assert!(linalg::max_abs_diff(&sm.cov(i), &oracle.cov_blocks[i][0]) < 1e-8);
        }
        for i in 0..p.len() - 1 {
            let want =
                &oracle.cov_blocks[i][1] + &oracle.mean[i] * oracle.mean[i + 1].transpose();
            assert!(linalg::max_abs_diff(&sm.cross[i], &want) < 1e-8);
        }
        count += 1;
    }
}

#[test]
fn hmm_matches_enumeration_across_instances() {
    let mut rng = SeqRng::new(201, 0);
    for k in 1..=4usize {
        for tk in 1..=6usize {
            for _ in 0..9 {
                let p = random_hmm(k, tk, &mut rng);
                let fast = forward_backward(&p).unwrap();
                let slow = enumerate_oracle(&p).unwrap();
                assert!((fast.log_z - slow.log_z).abs() < 1e-10);
                for t in 0..tk {
                    for j in 0..k {
                        assert!((fast.marginal[t][j] - slow.marginal[t][j]).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
