//! Computable quantities from the excess-risk theory: FIR prefactors, the
//! spectral ratio `ρ`, heavy-tail epsilons and the `9/5` envelope.

use nalgebra::DMatrix;

use crate::error::{check_dim, FiralError, Result};
use crate::linalg::{kron, require_pd, SymEigen};

const SERIES_CUTOFF: f64 = 1e-4;

/// `(e^α − α − 1) / α²`.
pub fn prefactor_upper(alpha: f64) -> f64 {
    if alpha.abs() < SERIES_CUTOFF {
        // 1/2 + α/6 + α²/24 + α³/120
        return 0.5 + alpha * (1.0 / 6.0 + alpha * (1.0 / 24.0 + alpha / 120.0));
    }
    (alpha.exp_m1() - alpha) / (alpha * alpha)
}

/// `(e^{−α} + α − 1) / α²`.
pub fn prefactor_lower(alpha: f64) -> f64 {
    prefactor_upper(-alpha)
}

/// `λmax(H_p^{-1/2} (I_{c−1} ⊗ V_p) H_p^{-1/2})`, the smallest `ρ` with
/// `I ⊗ V_p ⪯ ρ H_p`.
pub fn rho_spectral(hp: &DMatrix<f64>, vp: &DMatrix<f64>, c: usize) -> Result<f64> {
    if c < 2 {
        return Err(FiralError::InvalidInput("need c >= 2".into()));
    }
    let big = kron(&DMatrix::identity(c - 1, c - 1), vp);
    check_dim("H_p vs I⊗V_p", big.nrows(), hp.nrows())?;
    let r = require_pd(hp, "H_p in rho")?.map(|v| 1.0 / v.sqrt());
    Ok(SymEigen::new(&(&r * big * &r)).max())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyInputs {
    pub sigma: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub n: usize,
    pub delta: f64,
    pub d: usize,
    pub c: usize,
}

/// `ε_p = 2σ²L₁L₃ √((2 + 8 log(1/δ))/n)` and
/// `ε_q = 4σL₂ √(log(2d(c−1)/δ)/n) + ε_p`.
pub fn heavy_epsilons(inp: HeavyInputs) -> Result<(f64, f64)> {
    let HeavyInputs { sigma, l1, l2, l3, n, delta, d, c } = inp;
    if !(delta > 0.0 && delta < 1.0) || n == 0 || d == 0 || c < 2 {
        return Err(FiralError::InvalidInput("heavy-tail inputs out of range".into()));
    }
    let n = n as f64;
    let eps_p = 2.0 * sigma * sigma * l1 * l3 * ((2.0 + 8.0 * (1.0 / delta).ln()) / n).sqrt();
    let eps_q = 4.0 * sigma * l2 * ((2.0 * d as f64 * (c - 1) as f64 / delta).ln() / n).sqrt() + eps_p;
    Ok((eps_p, eps_q))
}

/// `(9/5) · FIR / n`.
pub fn nine_fifths_envelope(fir: f64, n: usize) -> f64 {
    1.8 * fir / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefactor_limits_and_values() {
        assert!((prefactor_upper(1e-8) - 0.5).abs() < 1e-6);
        assert!((prefactor_lower(1e-8) - 0.5).abs() < 1e-6);
        assert!((prefactor_upper(1.0) - (std::f64::consts::E - 2.0)).abs() < 1e-14);
        // continuity across the series cutoff
        let a = SERIES_CUTOFF;
        assert!((prefactor_upper(a * 0.999_999) - prefactor_upper(a * 1.000_001)).abs() < 1e-9);
    }

    #[test]
    fn prefactor_ordering_and_monotonicity() {
        let grid: Vec<f64> = (1..400).map(|i| i as f64 * 0.025).collect();
        for w in grid.windows(2) {
            assert!(prefactor_upper(w[0]) >= prefactor_lower(w[0]));
            assert!(prefactor_upper(w[1]) > prefactor_upper(w[0]));
            assert!(prefactor_lower(w[1]) < prefactor_lower(w[0]));
        }
    }

    #[test]
    fn rho_trivial_cases() {
        let vp = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let hp = kron(&DMatrix::identity(2, 2), &vp);
        assert!((rho_spectral(&hp, &vp, 3).unwrap() - 1.0).abs() < 1e-12);
        assert!((rho_spectral(&(hp * 2.0), &vp, 3).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn heavy_epsilons_hand_values() {
        let inp = HeavyInputs { sigma: 1.5, l1: 2.0, l2: 0.5, l3: 3.0, n: 100, delta: 0.1, d: 4, c: 3 };
        let (p, q) = heavy_epsilons(inp).unwrap();
        let ep = 2.0 * 2.25 * 6.0 * ((2.0 + 8.0 * 10f64.ln()) / 100.0).sqrt();
        let eq = 4.0 * 1.5 * 0.5 * (160f64.ln() / 100.0).sqrt() + ep;
        assert!((p - ep).abs() < 1e-12 && (q - eq).abs() < 1e-12);
        let (p2, _) = heavy_epsilons(HeavyInputs { l1: 4.0, ..inp }).unwrap();
        assert!((p2 - 2.0 * p).abs() < 1e-12);
        let mut last = (f64::INFINITY, f64::INFINITY);
        for n in [1_000, 1_000_000, 1_000_000_000] {
            let e = heavy_epsilons(HeavyInputs { n, ..inp }).unwrap();
            assert!(e.0 < last.0 && e.1 < last.1);
            last = e;
        }
    }

    #[test]
    fn envelope() {
        assert_eq!(nine_fifths_envelope(5.0, 1), 9.0);
        assert!((nine_fifths_envelope(5.0, 10) - 0.9).abs() < 1e-15);
    }
}
