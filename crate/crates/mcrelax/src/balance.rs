//! Noise-adapted choice of the discretization sizes and suboptimality
//! accounting.
//!
//! For noise level `delta` and regularity exponent `s` (dimension fixed to
//! one), the coefficient mesh size is `delta^max{2/(1+4s), 2/(3+4s)}` and
//! the averaging mesh size is the smaller of that and `delta^{1/(4s^2)}`.
//! Cell counts come from rounding the reciprocals up, with the averaging
//! count then rounded up to a multiple of the coefficient count so the
//! coefficient grid embeds into the averaging grid. The ceilings are taken
//! on the floating-point values exactly as evaluated; at delta = 1e-5 the
//! double inversion may land on 100 or 101 depending on the platform's
//! `powf`, and both are accepted downstream.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("noise level must satisfy 0 < delta <= 1, got {0}")]
    BadDelta(f64),
    #[error("regularity exponent must satisfy 0 < s <= 1, got {0}")]
    BadExponent(f64),
    #[error("lower bound {lower_bound} exceeds objective {objective} beyond tolerance")]
    BoundViolation { objective: f64, lower_bound: f64 },
}

/// Grid sizes balanced against a noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceChoice {
    pub delta: f64,
    pub s: f64,
    /// Spatial dimension; fixed to 1.
    pub d: usize,
    /// Raw coefficient mesh size delta^max{2/(1+4s), 2/(3+4s)}.
    pub h: f64,
    pub n_h: usize,
    /// Raw averaging mesh size min{h, delta^{1/(4s^2)}}.
    pub tau: f64,
    pub n_tau: usize,
}

pub fn choose_grids(delta: f64, s: f64) -> Result<BalanceChoice, BalanceError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(BalanceError::BadDelta(delta));
    }
    if !(s > 0.0 && s <= 1.0) {
        return Err(BalanceError::BadExponent(s));
    }
    let exponent = (2.0 / (1.0 + 4.0 * s)).max(2.0 / (3.0 + 4.0 * s));
    let h = delta.powf(exponent);
    let n_h = (1.0 / h).ceil() as usize;
    let tau = h.min(delta.powf(1.0 / (4.0 * s * s)));
    let n_tau_raw = (1.0 / tau).ceil() as usize;
    // Round up to a multiple of n_h so the coefficient grid embeds.
    let n_tau = n_tau_raw.div_ceil(n_h) * n_h;
    Ok(BalanceChoice {
        delta,
        s,
        d: 1,
        h,
        n_h,
        tau,
        n_tau,
    })
}

/// Slack accepted on the sign of epsilon before flagging a bound violation:
/// ten times the kernel tolerance.
pub const SUBOPT_NEG_TOL: f64 = 1e-7;

/// epsilon = objective - lower_bound. A lower bound above the objective by
/// more than the tolerance indicates a solver bug and is rejected.
pub fn suboptimality(objective: f64, lower_bound: f64) -> Result<f64, BalanceError> {
    let eps = objective - lower_bound;
    if eps < -SUBOPT_NEG_TOL * (1.0 + objective.abs()) {
        return Err(BalanceError::BoundViolation {
            objective,
            lower_bound,
        });
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig4(x: f64) -> f64 {
        // Round to 4 significant digits.
        if x == 0.0 {
            return 0.0;
        }
        let mag = 10f64.powi(3 - x.abs().log10().floor() as i32);
        (x * mag).round() / mag
    }

    #[test]
    fn benchmark_noise_levels() {
        let expected = [
            (1e-1, 3.981e-1, 3),
            (1e-2, 1.585e-1, 7),
            (1e-3, 6.310e-2, 16),
            (1e-4, 2.512e-2, 40),
        ];
        for (delta, h, n_h) in expected {
            let c = choose_grids(delta, 1.0).unwrap();
            assert_eq!(sig4(c.h), h, "h at delta {delta}");
            assert_eq!(c.n_h, n_h, "n_h at delta {delta}");
            assert_eq!(c.n_tau, c.n_h, "s = 1 forces matching grids");
            assert_eq!(sig4(c.tau), h);
        }
        // The double inversion at 1e-5 is a floating-point coin toss.
        let c = choose_grids(1e-5, 1.0).unwrap();
        assert_eq!(sig4(c.h), 1.000e-2);
        assert!(c.n_h == 100 || c.n_h == 101, "n_h = {}", c.n_h);
        assert_eq!(c.n_tau, c.n_h);
    }

    #[test]
    fn unit_noise_collapses_to_one_cell() {
        let c = choose_grids(1.0, 1.0).unwrap();
        assert_eq!(c.n_h, 1);
        assert_eq!(c.n_tau, 1);
        assert_eq!(c.h, 1.0);
    }

    #[test]
    fn cell_count_monotone_in_noise() {
        let mut last = 0usize;
        for k in 0..40 {
            let delta = 10f64.powf(-(k as f64) / 8.0);
            let c = choose_grids(delta, 1.0).unwrap();
            assert!(c.n_h >= last, "n_h dropped at delta {delta}");
            last = c.n_h;
        }
    }

    #[test]
    fn tau_equals_h_for_unit_exponent() {
        // For s = 1, delta^{1/4} >= delta^{2/5} on (0,1], so the averaging
        // grid always matches the coefficient grid.
        for k in 1..30 {
            let delta = 10f64.powf(-(k as f64) / 6.0);
            let c = choose_grids(delta, 1.0).unwrap();
            assert_eq!(c.tau, c.h);
            assert_eq!(c.n_tau, c.n_h);
        }
    }

    #[test]
    fn embedding_multiple_enforced() {
        // Smaller s decouples the grids; n_tau must be a multiple of n_h.
        for k in 1..=20 {
            let delta = 10f64.powf(-(k as f64) / 4.0);
            let c = choose_grids(delta, 0.5).unwrap();
            assert_eq!(c.n_tau % c.n_h, 0, "delta {delta}: {} vs {}", c.n_tau, c.n_h);
            assert!(c.n_tau >= c.n_h);
        }
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        assert!(choose_grids(0.0, 1.0).is_err());
        assert!(choose_grids(1.5, 1.0).is_err());
        assert!(choose_grids(1e-3, 0.0).is_err());
        assert!(choose_grids(1e-3, 1.2).is_err());
    }

    #[test]
    fn suboptimality_arithmetic() {
        assert!((suboptimality(0.1, 0.04).unwrap() - 0.06).abs() < 1e-15);
        assert_eq!(suboptimality(0.25, 0.25).unwrap(), 0.0);
        assert!(suboptimality(0.1, 0.2).is_err());
        // Tiny negatives within solver slack pass through.
        assert!(suboptimality(0.1, 0.1 + 1e-9).is_ok());
    }
}
