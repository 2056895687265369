//! In-process invariant checks behind `svae check`. Each check re-derives an
//! expected value from an independent route (dense oracle, enumeration,
//! finite differences) and compares.

use nalgebra::{DMatrix, DVector};
use svae_core::error::Result;
use svae_core::gradients::GradMode;
use svae_core::meanfield::{self, BlockUpdateConfig, BpMode};
use svae_core::rng::SeqRng;

type Mat = DMatrix<f64>;

type Check = (&'static str, fn() -> std::result::Result<(), String>);

fn expfam_grad_logz() -> std::result::Result<(), String> {
    let mut rng = SeqRng::new(1000, 0);
    for _ in 0..5 {
        let a = Mat::from_fn(2, 2, |_, _| rng.normal());
        let s = &a * a.transpose() + Mat::identity(2, 2);
        let m = DVector::from_fn(2, |_, _| rng.normal());
        let (eta, mu, _) = svae_core::expfam::niw_eval(&s, &m, 1.0 + rng.uniform(), 2.5)
            .map_err(|e| e.to_string())?;
        let h = 1e-5;
        for i in 0..eta.data.len() {
            let mut p = eta.clone();
            p.data[i] += h;
            let mut q = eta.clone();
            q.data[i] -= h;
            let fd = (svae_core::expfam::log_partition(&p).map_err(|e| e.to_string())?
                - svae_core::expfam::log_partition(&q).map_err(|e| e.to_string())?)
                / (2.0 * h);
            let want = mu.data[i];
            if (fd - want).abs() / want.abs().max(1.0) > 1e-5 {
                return Err(format!("NIW coord {i}: fd {fd} vs stat {want}"));
            }
        }
    }
    Ok(())
}

fn chain_oracle() -> std::result::Result<(), String> {
    let mut rng = SeqRng::new(1001, 0);
    for _ in 0..20 {
        let p = svae_core::chain::random_chain(5, 2, &mut rng);
        let fr = svae_core::chain::kalman_filter(&p).map_err(|e| e.to_string())?;
        let sm = svae_core::chain::kalman_smooth(&p, &fr).map_err(|e| e.to_string())?;
        let oracle = svae_core::chain::dense_oracle(&p).map_err(|e| e.to_string())?;
        if (fr.log_z - oracle.log_z).abs() > 1e-8 {
            return Err(format!("logZ {} vs {}", fr.log_z, oracle.log_z));
        }
        for t in 0..5 {
            if svae_core::linalg::max_abs_diff_vec(&sm.mean[t], &oracle.mean[t]) > 1e-8 {
                return Err(format!("mean mismatch at t={t}"));
            }
        }
    }
    Ok(())
}

fn parallel_equivalence() -> std::result::Result<(), String> {
    let mut rng = SeqRng::new(1002, 0);
    for &t in &[1usize, 3, 64, 257] {
        let p = svae_core::chain::random_chain(t, 3, &mut rng);
        let fr = svae_core::chain::kalman_filter(&p).map_err(|e| e.to_string())?;
        let (pf, _) = svae_core::parallel::parallel_filter(&p, None).map_err(|e| e.to_string())?;
        if (pf.log_z - fr.log_z).abs() > 1e-8 {
            return Err(format!("T={t}: parallel logZ diverges"));
        }
        for i in 0..t {
            if svae_core::linalg::max_abs_diff(&pf.big_f[i], &fr.big_f[i]) > 1e-8 {
                return Err(format!("T={t}: filtered precision diverges at {i}"));
            }
        }
    }
    for _ in 0..200 {
        let a = svae_core::parallel::random_filter_element(2, &mut rng);
        let b = svae_core::parallel::random_filter_element(2, &mut rng);
        let c = svae_core::parallel::random_filter_element(2, &mut rng);
        let l = svae_core::parallel::combine_filter(
            &svae_core::parallel::combine_filter(&a, &b).map_err(|e| e.to_string())?,
            &c,
        )
        .map_err(|e| e.to_string())?;
        let r = svae_core::parallel::combine_filter(
            &a,
            &svae_core::parallel::combine_filter(&b, &c).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        if svae_core::linalg::max_abs_diff(&l.phi22, &r.phi22) > 1e-8 {
            return Err("associativity violated".into());
        }
    }
    Ok(())
}

fn hmm_enumeration() -> std::result::Result<(), String> {
    let mut rng = SeqRng::new(1003, 0);
    for _ in 0..20 {
        let p = svae_core::hmm::random_hmm(3, 5, &mut rng);
        let fast = svae_core::hmm::forward_backward(&p).map_err(|e| e.to_string())?;
        let slow = svae_core::hmm::enumerate_oracle(&p).map_err(|e| e.to_string())?;
        if (fast.log_z - slow.log_z).abs() > 1e-10 {
            return Err("HMM logZ mismatch".into());
        }
        for t in 0..5 {
            for j in 0..3 {
                if (fast.marginal[t][j] - slow.marginal[t][j]).abs() > 1e-10 {
                    return Err("HMM marginal mismatch".into());
                }
            }
        }
    }
    Ok(())
}

fn meanfield_ascent() -> std::result::Result<(), String> {
    let mut rng = SeqRng::new(1004, 0);
    for _ in 0..5 {
        let g = meanfield::random_point_globals(2, 3, &mut rng);
        let recog = meanfield::random_recog(12, 2, &mut rng);
        let cfg = BlockUpdateConfig {
            max_iters: 200,
            tol_residual: 1e-9,
            tol_surrogate: 0.0,
            bp: BpMode::Sequential,
        };
        let st = meanfield::block_update(&g, &recog, &cfg, None).map_err(|e| e.to_string())?;
        for w in st.trace.windows(2) {
            if w[1] - w[0] < -1e-9 {
                return Err(format!("surrogate decreased by {}", w[0] - w[1]));
            }
        }
        if !st.converged || st.residual > 1e-8 {
            return Err(format!("did not converge (residual {})", st.residual));
        }
    }
    Ok(())
}

fn gradient_estimators() -> std::result::Result<(), String> {
    let mut rng = SeqRng::new(1005, 0);
    let g = meanfield::random_point_globals(1, 2, &mut rng);
    let recog = meanfield::random_recog(5, 1, &mut rng);
    let cfg = BlockUpdateConfig {
        max_iters: 300,
        tol_residual: 1e-12,
        tol_surrogate: 0.0,
        bp: BpMode::Sequential,
    };
    let a = svae_core::gradients::surrogate_gradients(&g, &recog, &cfg, GradMode::NoSolve)
        .map_err(|e| e.to_string())?;
    let b = svae_core::gradients::surrogate_gradients(&g, &recog, &cfg, GradMode::ImplicitFixedJ(0))
        .map_err(|e| e.to_string())?;
    for (ia, ib) in a.globals.leaf_ids().into_iter().zip(b.globals.leaf_ids()) {
        if a.grad(ia) != b.grad(ib) {
            return Err("NoSolve differs from Richardson J=0".into());
        }
    }
    let unrolled = svae_core::gradients::surrogate_gradients(&g, &recog, &cfg, GradMode::Unrolled)
        .map_err(|e| e.to_string())?;
    let capped =
        svae_core::gradients::surrogate_gradients(&g, &recog, &cfg, GradMode::ImplicitCapped)
            .map_err(|e| e.to_string())?;
    for (ia, ib) in unrolled
        .globals
        .leaf_ids()
        .into_iter()
        .zip(capped.globals.leaf_ids())
    {
        let ga = unrolled.grad(ia);
        let gb = capped.grad(ib);
        for (x, y) in ga.iter().zip(gb.iter()) {
            if (x - y).abs() > 1e-4 * (1.0 + x.abs()) {
                return Err(format!("capped vs unrolled at fixed point: {x} vs {y}"));
            }
        }
    }
    Ok(())
}

/// Run one suite (or "all"); returns the number of failures.
pub fn run_suite(which: &str) -> Result<usize> {
    let all: Vec<Check> = vec![
        ("expfam", expfam_grad_logz),
        ("chain", chain_oracle),
        ("parallel", parallel_equivalence),
        ("hmm", hmm_enumeration),
        ("meanfield", meanfield_ascent),
        ("gradients", gradient_estimators),
    ];
    let selected: Vec<&Check> = if which == "all" {
        all.iter().collect()
    } else {
        all.iter().filter(|(name, _)| *name == which).collect()
    };
    if selected.is_empty() {
        return Err(svae_core::SvaeError::Config(format!(
            "unknown suite '{which}' (expected all, expfam, chain, parallel, hmm, meanfield, gradients)"
        )));
    }
    let mut failures = 0;
    for (name, f) in selected {
        match f() {
            Ok(()) => println!("check {name:<10} PASS"),
            Err(msg) => {
                println!("check {name:<10} FAIL: {msg}");
                failures += 1;
            }
        }
    }
    Ok(failures)
}
