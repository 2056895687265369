//! Temporally parallel filtering and smoothing via associative scans.
//!
//! Each timestep becomes a scan element; an inclusive prefix scan under the
//! filter combine ⊗ yields all filtered messages, and a suffix scan under the
//! smoother combine ⊕ yields all smoothed marginals. The scan tree is
//! work-efficient (up-sweep/down-sweep) with a combine order that does not
//! depend on the worker count, so results are reproducible across parallelism
//! degrees.
//!
//! The combine operators drop multiplicative constants (they work on kernels),
//! so logZ is recovered after the scan: each predict normalizer depends only on
//! the filtered message at t and the next transition factor, and the terms are
//! summed in a fixed order.

use rayon::ThreadPool;

use crate::chain::{ChainPotentials, FilterResult, SmoothResult};
use crate::error::Result;
use crate::linalg::{self, Mat, Vec64};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Filter scan element: the f-part (Φ11, φ1, Φ12, φ2, Φ22) parameterizes the
/// pair kernel on (z_{t-1}, z_t) with natural parameters
/// (-½Φ11, -φ1, Φ12, φ2, -½Φ22), and the g-part (Γ, γ) the marginal kernel on
/// z_{t-1} with (-½Γ, γ).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterElement {
    pub phi11: Mat,
    pub phi1: Vec64,
    pub phi12: Mat,
    pub phi2: Vec64,
    pub phi22: Mat,
    pub gam: Mat,
    pub gamv: Vec64,
}

/// Smoother scan element (E11, ε1, E12, ε2, E22) on (z_t, z_{t+1}) with natural
/// parameters (-½E11, -ε1, E12, ε2, -½E22).
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherElement {
    pub e11: Mat,
    pub eps1: Vec64,
    pub e12: Mat,
    pub eps2: Vec64,
    pub e22: Mat,
}

/// Build the per-timestep filter elements.
///
/// Element 0 is the boundary: Γ = 0, γ = 0, Φ11 = Φ12 = 0, φ1 = 0,
/// (φ2, Φ22) = (h0 + r_1, J0 + R_1). For t ≥ 1 the transition and recognition
/// factors are folded: with W = R_t + J22, Γ_t = J11 - J12 W⁻¹ J12ᵀ and
/// γ_t = -h1 + J12 W⁻¹ (r_t + h2); the f-part carries the complement, with
/// φ1 = h1 + γ so that g_t · f_t reproduces the original potential.
pub fn make_filter_elements(p: &ChainPotentials) -> Result<Vec<FilterElement>> {
    p.check()?;
    let t_len = p.len();
    let d = p.dim();
    let mut out = Vec::with_capacity(t_len);
    out.push(FilterElement {
        phi11: Mat::zeros(d, d),
        phi1: Vec64::zeros(d),
        phi12: Mat::zeros(d, d),
        phi2: &p.init_h + &p.recog[0].0,
        phi22: &p.init_j + &p.recog[0].1,
        gam: Mat::zeros(d, d),
        gamv: Vec64::zeros(d),
    });
    for t in 1..t_len {
        let tr = &p.trans[t - 1];
        let (r, rr) = &p.recog[t];
        let w = rr + &tr.j22;
        let chol = linalg::chol(&w, "make_filter_elements R+J22")?;
        let w_j12t = chol.solve(&tr.j12.transpose()); // W⁻¹ J12ᵀ
        let gam = &tr.j11 - &tr.j12 * &w_j12t;
        let gamv = -&tr.h1 + &tr.j12 * chol.solve(&(r + &tr.h2));
        out.push(FilterElement {
            phi11: &tr.j11 - &gam,
            phi1: &tr.h1 + &gamv,
            phi12: tr.j12.clone(),
            phi2: r + &tr.h2,
            phi22: rr + &tr.j22,
            gam,
            gamv,
        });
    }
    Ok(out)
}

/// The associative filter combine a_i ⊗ a_j.
///
/// When the left element is a cumulative prefix its first three f-blocks and
/// g-part are zero; the combine then collapses to the sequential
/// predict+measure update (one Cholesky), which the scan's down-sweep hits for
/// every combine.
pub fn combine_filter(i: &FilterElement, j: &FilterElement) -> Result<FilterElement> {
    let d = i.phi22.nrows();
    let left_is_message = i.phi11.amax() == 0.0
        && i.phi12.amax() == 0.0
        && i.phi1.amax() == 0.0
        && i.gam.amax() == 0.0
        && i.gamv.amax() == 0.0;
    if left_is_message {
        let pmat = &j.gam + &i.phi22 + &j.phi11;
        let chol_p = linalg::chol(&pmat, "combine_filter P_ij")?;
        let u = &i.phi2 - &j.phi1 + &j.gamv;
        let p_u = chol_p.solve(&u);
        let p_phi12j = chol_p.solve(&j.phi12);
        return Ok(FilterElement {
            phi11: Mat::zeros(d, d),
            phi1: Vec64::zeros(d),
            phi12: Mat::zeros(d, d),
            phi2: &j.phi2 + j.phi12.transpose() * &p_u,
            phi22: &j.phi22 - j.phi12.transpose() * &p_phi12j,
            gam: Mat::zeros(d, d),
            gamv: Vec64::zeros(d),
        });
    }

    // Batched right-hand sides: one triangular sweep per factorization.
    let c = &j.gam + &i.phi22;
    let chol_c = linalg::chol(&c, "combine_filter C_ij")?;
    let mut c_rhs = Mat::zeros(d, d + 1);
    c_rhs.view_mut((0, 0), (d, d)).copy_from(&i.phi12.transpose());
    c_rhs.view_mut((0, d), (d, 1)).copy_from(&(&j.gamv + &i.phi2));
    let c_sol = chol_c.solve(&c_rhs);
    let c_phi12t = c_sol.view((0, 0), (d, d));
    let gam_ij = &i.phi11 - &i.phi12 * c_phi12t;
    let gamv_ij = -&i.phi1 + &i.phi12 * c_sol.view((0, d), (d, 1));

    let pmat = &c + &j.phi11;
    let chol_p = linalg::chol(&pmat, "combine_filter P_ij")?;
    let u = &i.phi2 - &j.phi1 + &j.gamv;
    let mut p_rhs = Mat::zeros(d, 2 * d + 1);
    p_rhs.view_mut((0, 0), (d, d)).copy_from(&i.phi12.transpose());
    p_rhs.view_mut((0, d), (d, d)).copy_from(&j.phi12);
    p_rhs.view_mut((0, 2 * d), (d, 1)).copy_from(&u);
    let p_sol = chol_p.solve(&p_rhs);
    let p_phi12i = p_sol.view((0, 0), (d, d));
    let p_phi12j = p_sol.view((0, d), (d, d));
    let p_u = p_sol.view((0, 2 * d), (d, 1));

    Ok(FilterElement {
        phi11: &i.phi11 - &i.phi12 * p_phi12i - &gam_ij,
        phi1: &i.phi1 - &i.phi12 * p_u + &gamv_ij,
        phi12: &i.phi12 * p_phi12j,
        phi2: &j.phi2 + j.phi12.transpose() * p_u,
        phi22: &j.phi22 - j.phi12.transpose() * p_phi12j,
        gam: &i.gam + &gam_ij,
        gamv: &i.gamv + &gamv_ij,
    })
}

/// Build the smoother elements from potentials and filtered messages.
///
/// Element T-1 is the boundary (E11, ε1) = (F_{T|T}, -f_{T|T}); for t < T-1,
/// e_t couples (z_t, z_{t+1}) through the transition, recognition, and the
/// filtered/predicted message quotient.
pub fn make_smoother_elements(p: &ChainPotentials, fr: &FilterResult) -> Result<Vec<SmootherElement>> {
    p.check()?;
    let t_len = p.len();
    let d = p.dim();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len - 1 {
        let tr = &p.trans[t];
        let (r, rr) = &p.recog[t + 1];
        out.push(SmootherElement {
            e11: &tr.j11 + &fr.big_f[t],
            eps1: &tr.h1 - &fr.f[t],
            e12: tr.j12.clone(),
            eps2: &tr.h2 + r - &fr.f[t + 1],
            e22: &tr.j22 + rr - &fr.big_f[t + 1],
        });
    }
    out.push(SmootherElement {
        e11: fr.big_f[t_len - 1].clone(),
        eps1: -&fr.f[t_len - 1],
        e12: Mat::zeros(d, d),
        eps2: Vec64::zeros(d),
        e22: Mat::zeros(d, d),
    });
    Ok(out)
}

/// The associative smoother combine e_i ⊕ e_j.
///
/// A cumulative suffix (the right argument along the suffix scan's critical
/// path) has E12 = E22 = 0 and ε2 = 0; the combine then reduces to the
/// sequential backward update with a single Cholesky.
pub fn combine_smoother(i: &SmootherElement, j: &SmootherElement) -> Result<SmootherElement> {
    let d = i.e11.nrows();
    let right_is_marginal = j.e12.amax() == 0.0 && j.e22.amax() == 0.0 && j.eps2.amax() == 0.0;
    if right_is_marginal {
        let dmat = &i.e22 + &j.e11;
        let chol = linalg::chol(&dmat, "combine_smoother D_ij")?;
        let w = &i.eps2 - &j.eps1;
        let d_w = chol.solve(&w);
        let d_e12i = chol.solve(&i.e12.transpose());
        return Ok(SmootherElement {
            e11: &i.e11 - &i.e12 * &d_e12i,
            eps1: &i.eps1 - &i.e12 * &d_w,
            e12: Mat::zeros(d, d),
            eps2: Vec64::zeros(d),
            e22: Mat::zeros(d, d),
        });
    }

    let dmat = &i.e22 + &j.e11;
    let chol = linalg::chol(&dmat, "combine_smoother D_ij")?;
    let w = &i.eps2 - &j.eps1;
    let d_w = chol.solve(&w);
    let d_e12i = chol.solve(&i.e12.transpose()); // D⁻¹ E12,iᵀ
    let d_e12j = chol.solve(&j.e12); // D⁻¹ E12,j
    Ok(SmootherElement {
        e11: &i.e11 - &i.e12 * &d_e12i,
        eps1: &i.eps1 - &i.e12 * &d_w,
        e12: &i.e12 * &d_e12j,
        eps2: &j.eps2 + j.e12.transpose() * &d_w,
        e22: &j.e22 - j.e12.transpose() * &d_e12j,
    })
}

/// Work-efficient inclusive prefix scan with a deterministic combine tree.
/// Returns the scanned vector and the number of sequential combine levels
/// (the critical-path depth in ⊗ applications).
pub fn scan_inclusive<T, F>(xs: &[T], op: F, pool: Option<&ThreadPool>) -> Result<(Vec<T>, usize)>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> Result<T> + Sync,
{
    let n = xs.len();
    let mut a: Vec<T> = xs.to_vec();
    if n <= 1 {
        return Ok((a, 0));
    }
    let mut levels = 0;

    // Apply one level of disjoint (read, write) combines, in parallel when a
    // pool is supplied. `targets` yields (read_idx, write_idx) pairs.
    let apply_level = |a: &mut Vec<T>, targets: Vec<(usize, usize)>| -> Result<()> {
        if targets.is_empty() {
            return Ok(());
        }
        // Small levels are cheaper serially than through the pool.
        let results: Vec<(usize, Result<T>)> = match pool {
            Some(pool) if targets.len() >= 16 => pool.install(|| {
                use rayon::prelude::*;
                targets
                    .par_iter()
                    .map(|&(r, w)| (w, op(&a[r], &a[w])))
                    .collect()
            }),
            _ => targets
                .iter()
                .map(|&(r, w)| (w, op(&a[r], &a[w])))
                .collect(),
        };
        for (w, res) in results {
            a[w] = res?;
        }
        Ok(())
    };

    // Up-sweep.
    let mut stride = 2usize;
    while stride / 2 < n {
        let half = stride / 2;
        let targets: Vec<(usize, usize)> = (0..)
            .map(|i| i * stride + stride - 1)
            .take_while(|&idx| idx < n)
            .map(|idx| (idx - half, idx))
            .collect();
        if targets.is_empty() {
            break;
        }
        apply_level(&mut a, targets)?;
        levels += 1;
        if stride >= n {
            break;
        }
        stride *= 2;
    }

    // Down-sweep.
    while stride >= 2 {
        let half = stride / 2;
        let targets: Vec<(usize, usize)> = (0..)
            .map(|i| i * stride + stride - 1)
            .take_while(|&idx| idx + half < n)
            .map(|idx| (idx, idx + half))
            .collect();
        if !targets.is_empty() {
            apply_level(&mut a, targets)?;
            levels += 1;
        }
        stride /= 2;
    }

    Ok((a, levels))
}

/// Inclusive suffix scan: out[t] = xs[t] ∘ xs[t+1] ∘ ... ∘ xs[n-1].
pub fn scan_suffix<T, F>(xs: &[T], op: F, pool: Option<&ThreadPool>) -> Result<(Vec<T>, usize)>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> Result<T> + Sync,
{
    let rev: Vec<T> = xs.iter().rev().cloned().collect();
    let (mut scanned, levels) = scan_inclusive(&rev, |a, b| op(b, a), pool)?;
    scanned.reverse();
    Ok((scanned, levels))
}

/// Diagnostics from a parallel pass.
#[derive(Debug, Clone, Copy)]
pub struct ScanStats {
    /// Sequential combine levels on the critical path.
    pub levels: usize,
}

/// Parallel filter: prefix scan over ⊗, then a logZ post-pass.
/// Produces the same filtered messages and logZ as [`crate::chain::kalman_filter`].
pub fn parallel_filter(
    p: &ChainPotentials,
    pool: Option<&ThreadPool>,
) -> Result<(FilterResult, ScanStats)> {
    let elements = make_filter_elements(p)?;
    let (scanned, levels) = scan_inclusive(&elements, combine_filter, pool)?;
    let t_len = p.len();
    let d = p.dim();

    let mut f = Vec::with_capacity(t_len);
    let mut big_f = Vec::with_capacity(t_len);
    for e in &scanned {
        f.push(e.phi2.clone());
        big_f.push(e.phi22.clone());
    }

    // Predicted messages from filtered ones (measurement is additive).
    let mut fp = Vec::with_capacity(t_len - 1);
    let mut big_fp = Vec::with_capacity(t_len - 1);
    for t in 1..t_len {
        fp.push(&f[t] - &p.recog[t].0);
        big_fp.push(&big_f[t] - &p.recog[t].1);
    }

    // logZ post-pass: per-step predict normalizers, each a function of the
    // filtered message at t and the next transition; evaluated in parallel but
    // summed in index order for worker-count independence.
    let term = |t: usize| -> Result<f64> {
        let tr = &p.trans[t];
        let pt = &big_f[t] + &tr.j11;
        let chol = linalg::chol(&pt, "parallel_filter logZ P_t")?;
        let resid = &f[t] - &tr.h1;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(0.5 * (resid.dot(&chol.solve(&resid)) - logdet) + d as f64 / 2.0 * LN_2PI)
    };
    let terms: Vec<Result<f64>> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..t_len - 1).into_par_iter().map(term).collect()
        }),
        None => (0..t_len - 1).map(term).collect(),
    };
    let mut log_z = 0.0;
    for t in terms {
        log_z += t?;
    }
    let chol = linalg::chol(&big_f[t_len - 1], "parallel_filter F_{T|T}")?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    log_z += 0.5 * (f[t_len - 1].dot(&chol.solve(&f[t_len - 1])) - logdet) + d as f64 / 2.0 * LN_2PI;

    let mut p_list = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        p_list.push(&big_f[t] + &p.trans[t].j11);
    }

    Ok((
        FilterResult {
            f,
            big_f,
            fp,
            big_fp,
            p: p_list,
            log_z,
        },
        ScanStats { levels },
    ))
}

/// Parallel smoother: suffix scan over ⊕ on elements built from the filtered
/// messages; cross-statistics are recovered per-step from C_t afterwards.
pub fn parallel_smooth(
    p: &ChainPotentials,
    fr: &FilterResult,
    pool: Option<&ThreadPool>,
) -> Result<(SmoothResult, ScanStats)> {
    let elements = make_smoother_elements(p, fr)?;
    let (scanned, levels) = scan_suffix(&elements, combine_smoother, pool)?;
    let t_len = p.len();

    let mut fs = Vec::with_capacity(t_len);
    let mut big_fs = Vec::with_capacity(t_len);
    for e in &scanned {
        fs.push(-&e.eps1);
        big_fs.push(e.e11.clone());
    }

    // Per-step marginal moments and cross stats; parallel over t.
    let stat = |t: usize| -> Result<(Vec64, Mat, Option<(Mat, Mat)>)> {
        let chol = linalg::chol(&big_fs[t], "parallel_smooth F_{t|T}")?;
        let cov = chol.inverse();
        let mean = &cov * &fs[t];
        let second = &mean * mean.transpose() + &cov;
        let cross_info = if t + 1 < t_len {
            let tr = &p.trans[t];
            let ct = &big_fs[t + 1] - &fr.big_fp[t] + &tr.j22;
            let chol_c = linalg::chol(&ct, "parallel_smooth C_t")?;
            let j12_ct = chol_c.solve(&tr.j12.transpose()).transpose();
            Some((ct, &cov * &j12_ct))
        } else {
            None
        };
        Ok((mean, second, cross_info))
    };
    let stats: Vec<Result<(Vec64, Mat, Option<(Mat, Mat)>)>> = match pool {
        Some(pool) => pool.install(|| {
            use rayon::prelude::*;
            (0..t_len).into_par_iter().map(stat).collect()
        }),
        None => (0..t_len).map(stat).collect(),
    };

    let mut mean = Vec::with_capacity(t_len);
    let mut second = Vec::with_capacity(t_len);
    let mut c_list = Vec::with_capacity(t_len - 1);
    let mut cross_half = Vec::with_capacity(t_len - 1);
    for s in stats {
        let (m, s2, cross_info) = s?;
        mean.push(m);
        second.push(s2);
        if let Some((ct, half)) = cross_info {
            c_list.push(ct);
            cross_half.push(half);
        }
    }
    let mut cross = Vec::with_capacity(t_len - 1);
    for t in 0..t_len - 1 {
        cross.push(&cross_half[t] + &mean[t] * mean[t + 1].transpose());
    }

    Ok((
        SmoothResult {
            fs,
            big_fs,
            c: c_list,
            mean,
            second,
            cross,
        },
        ScanStats { levels },
    ))
}

/// Random valid filter element (used by the associativity property tests).
pub fn random_filter_element(d: usize, rng: &mut crate::rng::SeqRng) -> FilterElement {
    let spd = |rng: &mut crate::rng::SeqRng| -> Mat {
        let a = Mat::from_fn(d, d, |_, _| rng.normal());
        &a * a.transpose() * (1.0 / d as f64) + Mat::identity(d, d)
    };
    let vecr = |rng: &mut crate::rng::SeqRng| -> Vec64 { Vec64::from_fn(d, |_, _| rng.normal()) };
    // PSD (Γ, Φ11) and SPD Φ22 keep every C_ij and P_ij in the triple SPD.
    FilterElement {
        phi11: spd(rng),
        phi1: vecr(rng),
        phi12: Mat::from_fn(d, d, |_, _| rng.normal() * 0.5),
        phi2: vecr(rng),
        phi22: spd(rng),
        gam: spd(rng),
        gamv: vecr(rng),
    }
}

pub fn random_smoother_element(d: usize, rng: &mut crate::rng::SeqRng) -> SmootherElement {
    let spd = |rng: &mut crate::rng::SeqRng| -> Mat {
        let a = Mat::from_fn(d, d, |_, _| rng.normal());
        &a * a.transpose() * (1.0 / d as f64) + Mat::identity(d, d)
    };
    let vecr = |rng: &mut crate::rng::SeqRng| -> Vec64 { Vec64::from_fn(d, |_, _| rng.normal()) };
    SmootherElement {
        e11: spd(rng),
        eps1: vecr(rng),
        e12: Mat::from_fn(d, d, |_, _| rng.normal() * 0.5),
        eps2: vecr(rng),
        e22: spd(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{dense_oracle, kalman_filter, kalman_smooth, random_chain};
    use crate::rng::SeqRng;

    fn filter_elem_diff(a: &FilterElement, b: &FilterElement) -> f64 {
        [
            linalg::max_abs_diff(&a.phi11, &b.phi11),
            linalg::max_abs_diff_vec(&a.phi1, &b.phi1),
            linalg::max_abs_diff(&a.phi12, &b.phi12),
            linalg::max_abs_diff_vec(&a.phi2, &b.phi2),
            linalg::max_abs_diff(&a.phi22, &b.phi22),
            linalg::max_abs_diff(&a.gam, &b.gam),
            linalg::max_abs_diff_vec(&a.gamv, &b.gamv),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    fn smoother_elem_diff(a: &SmootherElement, b: &SmootherElement) -> f64 {
        [
            linalg::max_abs_diff(&a.e11, &b.e11),
            linalg::max_abs_diff_vec(&a.eps1, &b.eps1),
            linalg::max_abs_diff(&a.e12, &b.e12),
            linalg::max_abs_diff_vec(&a.eps2, &b.eps2),
            linalg::max_abs_diff(&a.e22, &b.e22),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    #[test]
    fn boundary_element_invariant() {
        let mut rng = SeqRng::new(21, 0);
        let p = random_chain(4, 2, &mut rng);
        let els = make_filter_elements(&p).unwrap();
        assert_eq!(els[0].gam, Mat::zeros(2, 2));
        assert_eq!(els[0].gamv, Vec64::zeros(2));
        assert_eq!(els[0].phi11, Mat::zeros(2, 2));
        assert_eq!(els[0].phi12, Mat::zeros(2, 2));
        assert_eq!(els[0].phi1, Vec64::zeros(2));
        assert_eq!(els[0].phi2, &p.init_h + &p.recog[0].0);
        assert_eq!(els[0].phi22, &p.init_j + &p.recog[0].1);
    }

    #[test]
    fn decoupled_element_reduction() {
        // J12 = 0: Γ_t = J11 and γ_t = -h1.
        let mut rng = SeqRng::new(22, 0);
        let mut p = random_chain(3, 2, &mut rng);
        for tr in &mut p.trans {
            tr.j12 = Mat::zeros(2, 2);
        }
        let els = make_filter_elements(&p).unwrap();
        for (t, e) in els.iter().enumerate().skip(1) {
            assert!(linalg::max_abs_diff(&e.gam, &p.trans[t - 1].j11) < 1e-14);
            assert!(linalg::max_abs_diff_vec(&e.gamv, &(-&p.trans[t - 1].h1)) < 1e-14);
        }
    }

    #[test]
    fn element_matches_quadrature() {
        // Integrate the defining integral of (Γ, γ) on a fine 1-D grid.
        let mut rng = SeqRng::new(23, 0);
        let p = random_chain(2, 1, &mut rng);
        let els = make_filter_elements(&p).unwrap();
        let tr = &p.trans[0];
        let (r, rr) = &p.recog[1];

        let log_g = |z: f64| -> f64 {
            // log ∫ exp(-½J11 z² - h1 z + J12 z z' - ½(J22+R) z'² + (h2+r) z') dz'
            let mut total: f64 = 0.0;
            let (lo, hi, n) = (-60.0f64, 60.0f64, 2_400_000usize);
            let dz = (hi - lo) / n as f64;
            let a = 0.5 * (tr.j22[(0, 0)] + rr[(0, 0)]);
            let b = tr.j12[(0, 0)] * z + tr.h2[0] + r[0];
            // Stabilize: max of the integrand exponent.
            let zstar = b / (2.0 * a);
            let emax = -a * zstar * zstar + b * zstar;
            for i in 0..n {
                let zp = lo + (i as f64 + 0.5) * dz;
                total += (-a * zp * zp + b * zp - emax).exp();
            }
            -0.5 * tr.j11[(0, 0)] * z * z - tr.h1[0] * z + emax + (total * dz).ln()
        };

        let (l_m, l_0, l_p) = (log_g(-1.0), log_g(0.0), log_g(1.0));
        let gamma_fd = -(l_p + l_m - 2.0 * l_0);
        let gamv_fd = (l_p - l_m) / 2.0;
        assert!(
            (gamma_fd - els[1].gam[(0, 0)]).abs() < 1e-6,
            "{gamma_fd} vs {}",
            els[1].gam[(0, 0)]
        );
        assert!(
            (gamv_fd - els[1].gamv[0]).abs() < 1e-6,
            "{gamv_fd} vs {}",
            els[1].gamv[0]
        );
    }

    #[test]
    fn left_fold_reproduces_sequential_filter() {
        let mut rng = SeqRng::new(24, 0);
        let p = random_chain(7, 3, &mut rng);
        let fr = kalman_filter(&p).unwrap();
        let els = make_filter_elements(&p).unwrap();
        let mut acc = els[0].clone();
        assert!(linalg::max_abs_diff(&acc.phi22, &fr.big_f[0]) < 1e-10);
        for (t, e) in els.iter().enumerate().skip(1) {
            acc = combine_filter(&acc, e).unwrap();
            assert!(
                linalg::max_abs_diff(&acc.phi22, &fr.big_f[t]) < 1e-10,
                "t={t}"
            );
            assert!(linalg::max_abs_diff_vec(&acc.phi2, &fr.f[t]) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn combine_associativity() {
        let mut rng = SeqRng::new(25, 0);
        for _ in 0..1000 {
            let a = random_filter_element(2, &mut rng);
            let b = random_filter_element(2, &mut rng);
            let c = random_filter_element(2, &mut rng);
            let left = combine_filter(&combine_filter(&a, &b).unwrap(), &c).unwrap();
            let right = combine_filter(&a, &combine_filter(&b, &c).unwrap()).unwrap();
            let d = filter_elem_diff(&left, &right);
            assert!(d < 1e-8, "associativity violated by {d}");
        }
    }

    #[test]
    fn smoother_associativity() {
        let mut rng = SeqRng::new(26, 0);
        for _ in 0..1000 {
            let a = random_smoother_element(2, &mut rng);
            let b = random_smoother_element(2, &mut rng);
            let c = random_smoother_element(2, &mut rng);
            let left = combine_smoother(&combine_smoother(&a, &b).unwrap(), &c).unwrap();
            let right = combine_smoother(&a, &combine_smoother(&b, &c).unwrap()).unwrap();
            let d = smoother_elem_diff(&left, &right);
            assert!(d < 1e-8, "associativity violated by {d}");
        }
    }

    #[test]
    fn neutral_dynamics_is_additive_fusion() {
        // A neutral element (all blocks zero except (φ2, Φ22) = an incoming
        // message (f, F)) combined with a chain element reduces to the
        // sequential predict+measurement update: the incoming precision fuses
        // additively inside P = F + J11.
        let mut rng = SeqRng::new(27, 0);
        let p = random_chain(2, 2, &mut rng);
        let els = make_filter_elements(&p).unwrap();
        let d = 2;
        let f_in = Vec64::from_column_slice(&[0.3, -0.7]);
        let big_f_in = Mat::from_row_slice(d, d, &[1.4, 0.2, 0.2, 0.9]);
        let neutral = FilterElement {
            phi11: Mat::zeros(d, d),
            phi1: Vec64::zeros(d),
            phi12: Mat::zeros(d, d),
            phi2: f_in.clone(),
            phi22: big_f_in.clone(),
            gam: Mat::zeros(d, d),
            gamv: Vec64::zeros(d),
        };
        let out = combine_filter(&neutral, &els[1]).unwrap();

        let tr = &p.trans[0];
        let (r, rr) = &p.recog[1];
        let pt = &big_f_in + &tr.j11;
        let chol = linalg::chol(&pt, "test").unwrap();
        let resid = &f_in - &tr.h1;
        let want_big = &tr.j22 + rr - tr.j12.transpose() * chol.solve(&tr.j12);
        let want_f = &tr.h2 + r + tr.j12.transpose() * chol.solve(&resid);
        assert!(linalg::max_abs_diff(&out.phi22, &want_big) < 1e-12);
        assert!(linalg::max_abs_diff_vec(&out.phi2, &want_f) < 1e-12);
        // The combined element stays message-like: first three blocks zero.
        assert!(out.phi11.amax() < 1e-12 && out.phi12.amax() < 1e-12);
        assert!(out.phi1.amax() < 1e-12);
    }

    #[test]
    fn scan_matches_fold_on_integers() {
        // Cheap sanity for the tree algorithm itself using exact arithmetic.
        let op = |a: &i64, b: &i64| -> Result<i64> { Ok(a * 31 + b) }; // non-commutative, associative? No.
        // Use an associative non-commutative op: 2x2 integer matrix product.
        let mul = |a: &[i64; 4], b: &[i64; 4]| -> Result<[i64; 4]> {
            Ok([
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ])
        };
        let _ = op;
        for n in 1..=33usize {
            let xs: Vec<[i64; 4]> = (0..n)
                .map(|i| {
                    let k = i as i64;
                    [1, k % 3, (k + 1) % 2, 1]
                })
                .collect();
            let (scan, levels) = scan_inclusive(&xs, mul, None).unwrap();
            let mut acc = xs[0];
            assert_eq!(scan[0], acc);
            for i in 1..n {
                acc = mul(&acc, &xs[i]).unwrap();
                assert_eq!(scan[i], acc, "n={n} i={i}");
            }
            let bound = 2 * (n as f64).log2().ceil() as usize + 1;
            assert!(levels <= bound, "n={n}: {levels} > {bound}");
        }
    }

    #[test]
    fn parallel_filter_matches_sequential() {
        let mut rng = SeqRng::new(28, 0);
        for &(t, d) in &[(1usize, 2usize), (2, 1), (5, 3), (64, 2), (257, 2)] {
            let p = random_chain(t, d, &mut rng);
            let fr = kalman_filter(&p).unwrap();
            let (pf, stats) = parallel_filter(&p, None).unwrap();
            for i in 0..t {
                assert!(
                    linalg::max_abs_diff(&pf.big_f[i], &fr.big_f[i]) < 1e-8,
                    "T={t} D={d} i={i}"
                );
                assert!(linalg::max_abs_diff_vec(&pf.f[i], &fr.f[i]) < 1e-8);
            }
            assert!(
                (pf.log_z - fr.log_z).abs() < 1e-8,
                "T={t} D={d}: {} vs {}",
                pf.log_z,
                fr.log_z
            );
            let bound = 2 * (t.max(1) as f64).log2().ceil() as usize + 1;
            assert!(stats.levels <= bound);
        }
    }

    #[test]
    fn parallel_smoother_matches_sequential() {
        let mut rng = SeqRng::new(29, 0);
        for &(t, d) in &[(1usize, 2usize), (3, 2), (17, 1), (64, 3)] {
            let p = random_chain(t, d, &mut rng);
            let fr = kalman_filter(&p).unwrap();
            let sm = kalman_smooth(&p, &fr).unwrap();
            let (ps, _) = parallel_smooth(&p, &fr, None).unwrap();
            for i in 0..t {
                assert!(
                    linalg::max_abs_diff(&ps.big_fs[i], &sm.big_fs[i]) < 1e-8,
                    "T={t} D={d} i={i}"
                );
                assert!(linalg::max_abs_diff_vec(&ps.fs[i], &sm.fs[i]) < 1e-8);
                assert!(linalg::max_abs_diff_vec(&ps.mean[i], &sm.mean[i]) < 1e-8);
            }
            for i in 0..t - 1 {
                assert!(linalg::max_abs_diff(&ps.cross[i], &sm.cross[i]) < 1e-8);
            }
        }
    }

    #[test]
    fn smoother_boundary_equals_filtered_at_last_step() {
        let mut rng = SeqRng::new(30, 0);
        let p = random_chain(5, 2, &mut rng);
        let fr = kalman_filter(&p).unwrap();
        let els = make_smoother_elements(&p, &fr).unwrap();
        assert!(linalg::max_abs_diff(&els[4].e11, &fr.big_f[4]) < 1e-15);
        assert!(linalg::max_abs_diff_vec(&els[4].eps1, &(-&fr.f[4])) < 1e-15);
    }

    #[test]
    fn pool_results_independent_of_worker_count() {
        let mut rng = SeqRng::new(31, 0);
        let p = random_chain(100, 2, &mut rng);
        let serial = parallel_filter(&p, None).unwrap().0;
        for threads in [1usize, 2, 8] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let pooled = parallel_filter(&p, Some(&pool)).unwrap().0;
            assert_eq!(pooled.log_z, serial.log_z, "threads={threads}");
            for t in 0..100 {
                assert_eq!(pooled.f[t], serial.f[t]);
                assert_eq!(pooled.big_f[t], serial.big_f[t]);
            }
        }
    }

    #[test]
    fn oracle_equivalence_small_chains() {
        let mut rng = SeqRng::new(32, 0);
        let p = random_chain(6, 2, &mut rng);
        let (pf, _) = parallel_filter(&p, None).unwrap();
        let (ps, _) = parallel_smooth(&p, &pf, None).unwrap();
        let oracle = dense_oracle(&p).unwrap();
        assert!((pf.log_z - oracle.log_z).abs() < 1e-8);
        for t in 0..6 {
            assert!(linalg::max_abs_diff_vec(&ps.mean[t], &oracle.mean[t]) < 1e-8);
        }
    }
}
