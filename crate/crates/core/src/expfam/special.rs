//! Special functions needed by the exponential-family log partition functions:
//! digamma, log-gamma, the multivariate log-gamma, and a stable logsumexp.
//!
//! Implemented with recurrence + asymptotic (Stirling/Bernoulli) series so the
//! crate carries no external special-function dependency.

use crate::error::{Result, SvaeError};

/// Bernoulli-number coefficients B_{2k}/(2k(2k-1)) terms enter lgamma;
/// digamma uses B_{2k}/2k. Stored as B_2, B_4, ..., B_16.
const BERNOULLI: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// log Γ(x) for x > 0, accurate to ~1e-13 relative.
pub fn lgamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(SvaeError::Domain(format!("lgamma requires x > 0, got {x}")));
    }
    // Shift into the asymptotic regime, then apply the Stirling series.
    let mut shift = 0.0;
    let mut z = x;
    while z < 12.0 {
        shift -= z.ln();
        z += 1.0;
    }
    let zinv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut zpow = 1.0 / z;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let two_k = 2.0 * (k as f64 + 1.0);
        series += b / (two_k * (two_k - 1.0)) * zpow;
        zpow *= zinv2;
    }
    Ok(shift + (z - 0.5) * z.ln() - z + 0.5 * LN_2PI + series)
}

/// Digamma ψ(x) for x > 0, accurate to ~1e-12 on [1e-3, 1e6].
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(SvaeError::Domain(format!(
            "digamma requires x > 0, got {x}"
        )));
    }
    let mut shift = 0.0;
    let mut z = x;
    while z < 12.0 {
        shift -= 1.0 / z;
        z += 1.0;
    }
    let zinv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut zpow = zinv2;
    for (k, b) in BERNOULLI.iter().enumerate() {
        let two_k = 2.0 * (k as f64 + 1.0);
        series += b / two_k * zpow;
        zpow *= zinv2;
    }
    Ok(shift + z.ln() - 0.5 / z - series)
}

/// Trigamma ψ₁(x) = dψ/dx for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(SvaeError::Domain(format!(
            "trigamma requires x > 0, got {x}"
        )));
    }
    let mut shift = 0.0;
    let mut z = x;
    while z < 12.0 {
        shift += 1.0 / (z * z);
        z += 1.0;
    }
    let zinv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut zpow = zinv2 / z;
    for b in BERNOULLI.iter() {
        series += b * zpow;
        zpow *= zinv2;
    }
    Ok(shift + 1.0 / z + 0.5 * zinv2 + series)
}

/// Multivariate log-gamma log Γ_n(a), defined for a > (n-1)/2.
pub fn log_multivariate_gamma(n: usize, a: f64) -> Result<f64> {
    if !(a > (n as f64 - 1.0) / 2.0) {
        return Err(SvaeError::Domain(format!(
            "log_multivariate_gamma requires a > (n-1)/2, got a={a}, n={n}"
        )));
    }
    let mut total = (n * (n - 1)) as f64 / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=n {
        total += lgamma(a + (1.0 - j as f64) / 2.0)?;
    }
    Ok(total)
}

/// Derivative of log Γ_n at a: Σ_{j=1}^n ψ(a + (1-j)/2).
pub fn digamma_multivariate(n: usize, a: f64) -> Result<f64> {
    let mut total = 0.0;
    for j in 1..=n {
        total += digamma(a + (1.0 - j as f64) / 2.0)?;
    }
    Ok(total)
}

/// Numerically stable log Σ exp(xᵢ). Ignores -inf entries; returns -inf if all are.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Slowly-converging but independent series: ψ(x) = -γ + Σ_{k≥0} (1/(k+1) - 1/(k+x)).
    fn digamma_series_oracle(x: f64) -> f64 {
        const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
        let mut s = -EULER_MASCHERONI;
        for k in 0..20_000_000u64 {
            let kf = k as f64;
            s += 1.0 / (kf + 1.0) - 1.0 / (kf + x);
        }
        // Tail correction: Σ_{k≥K} (1/(k+1) - 1/(k+x)) ≈ (x-1)/K.
        s + (x - 1.0) / 20_000_000.0
    }

    #[test]
    fn digamma_against_series() {
        for &x in &[0.5, 1.0, 2.0, 3.75, 10.0] {
            let got = digamma(x).unwrap();
            let want = digamma_series_oracle(x);
            assert!((got - want).abs() < 1e-6, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn digamma_of_one_is_minus_euler() {
        assert!((digamma(1.0).unwrap() + 0.577_215_664_901_532_9).abs() < 1e-12);
    }

    #[test]
    fn digamma_recurrence_property() {
        // ψ(x+1) = ψ(x) + 1/x, exercised across the spec's domain.
        for &x in &[1e-3, 0.02, 0.7, 5.0, 123.4, 1e6] {
            let lhs = digamma(x + 1.0).unwrap();
            let rhs = digamma(x).unwrap() + 1.0 / x;
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn trigamma_is_digamma_derivative() {
        let h = 1e-6;
        for &x in &[0.2, 1.0, 4.5, 30.0] {
            let fd = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert!((fd - trigamma(x).unwrap()).abs() < 1e-6, "x={x}");
        }
        // ψ₁(1) = π²/6
        let want = std::f64::consts::PI * std::f64::consts::PI / 6.0;
        assert!((trigamma(1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn lgamma_known_values() {
        assert!(lgamma(1.0).unwrap().abs() < 1e-13);
        assert!(lgamma(2.0).unwrap().abs() < 1e-13);
        assert!((lgamma(5.0).unwrap() - (24.0f64).ln()).abs() < 1e-12);
        // Γ(1/2) = √π
        assert!((lgamma(0.5).unwrap() - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
    }

    #[test]
    fn lgamma_matches_digamma_derivative() {
        let h = 1e-6;
        for &x in &[0.3, 1.7, 8.0, 40.0] {
            let fd = (lgamma(x + h).unwrap() - lgamma(x - h).unwrap()) / (2.0 * h);
            assert!((fd - digamma(x).unwrap()).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn multivariate_gamma_reduces_to_gamma() {
        for &x in &[0.7, 2.0, 9.5] {
            assert!(
                (log_multivariate_gamma(1, x).unwrap() - lgamma(x).unwrap()).abs() < 1e-14,
                "x={x}"
            );
        }
    }

    #[test]
    fn logsumexp_basics() {
        assert!((logsumexp(&[0.0, 0.0]) - (2.0f64).ln()).abs() < 1e-15);
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + (2.0f64).ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((logsumexp(&[f64::NEG_INFINITY, 3.0]) - 3.0).abs() < 1e-15);
    }
}
