//! Matérn correlation with compact-support truncation.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    /// Lengthscale `l` (m).
    pub lengthscale: f64,
    /// Smoothness `nu` (> 0).
    pub nu: f64,
    /// Correlations vanish beyond `gamma * l`.
    pub gamma: f64,
    /// Terrain slope standard deviation (unitless).
    pub slope_sigma: f64,
    /// Grid nodes within `update_radius * l` of a hit are updated.
    pub update_radius: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            lengthscale: 4.0,
            nu: 1.5,
            gamma: 4.0,
            slope_sigma: 0.3,
            update_radius: 1.0,
        }
    }
}

impl KernelConfig {
    /// Defaults with the lengthscale set to a fifth of the domain width.
    pub fn for_domain_width(width: f64) -> Self {
        KernelConfig { lengthscale: width / 5.0, ..KernelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0) {
            return Err(Error::InvalidConfig("kernel lengthscale must be > 0".into()));
        }
        if !(self.nu > 0.0) {
            return Err(Error::InvalidConfig("kernel smoothness must be > 0".into()));
        }
        if !(self.gamma >= 1.0) {
            return Err(Error::InvalidConfig("kernel truncation multiplier must be >= 1".into()));
        }
        if !(self.slope_sigma >= 0.0 && self.update_radius >= 0.0) {
            return Err(Error::InvalidConfig("slope sigma and update radius must be >= 0".into()));
        }
        Ok(())
    }

    pub fn support_radius(&self) -> f64 {
        self.gamma * self.lengthscale
    }
}

/// Modified Bessel function of the second kind, `K_nu(x)` for `x > 0`, from
/// `K_nu(x) = int_0^inf exp(-x cosh t) cosh(nu t) dt` by the trapezoidal rule
/// (spectrally accurate for this double-exponentially decaying integrand).
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k needs x > 0");
    let h = 0.01;
    let f = |t: f64| (-x * t.cosh() + nu * t).exp() * 0.5 + (-x * t.cosh() - nu * t).exp() * 0.5;
    let mut sum = 0.5 * f(0.0);
    let mut t = h;
    loop {
        let v = f(t);
        sum += v;
        if v < 1e-18 * sum && x * t.cosh() > nu * t + 40.0 {
            break;
        }
        t += h;
    }
    sum * h
}

/// Matérn correlation without truncation; `k(0) = 1`.
pub fn matern_full(s: f64, lengthscale: f64, nu: f64) -> f64 {
    debug_assert!(s >= 0.0);
    if s == 0.0 {
        return 1.0;
    }
    let r = s / lengthscale;
    if nu == 0.5 {
        (-r).exp()
    } else if nu == 1.5 {
        let a = 3f64.sqrt() * r;
        (1.0 + a) * (-a).exp()
    } else if nu == 2.5 {
        let a = 5f64.sqrt() * r;
        (1.0 + a + a * a / 3.0) * (-a).exp()
    } else {
        let a = (2.0 * nu).sqrt() * r;
        if a > 700.0 {
            return 0.0;
        }
        let v = a.powf(nu) * bessel_k(nu, a) / (gamma(nu) * 2f64.powf(nu - 1.0));
        v.min(1.0)
    }
}

/// Truncated Matérn: exactly zero for `s > gamma * l`.
pub fn matern(s: f64, cfg: &KernelConfig) -> f64 {
    if s > cfg.support_radius() {
        0.0
    } else {
        matern_full(s, cfg.lengthscale, cfg.nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values of K_nu(x) from an arbitrary-precision evaluation
    // (mpmath.besselk, 30 digits).
    const BESSEL_REF: &[(f64, f64, f64)] = &[
        (0.5, 1.0, 0.461_068_504_447_894_56),
        (1.0, 0.1, 9.853_844_780_870_606),
        (1.0, 2.0, 0.139_865_881_816_522_43),
        (1.5, 3.0, 0.048_034_646_842_352_79),
        (2.3, 0.7, 5.975_961_761_210_581),
        (0.2, 12.0, 2.204_355_576_254_692_3e-6),
    ];

    #[test]
    fn bessel_against_reference() {
        for &(nu, x, expected) in BESSEL_REF {
            let got = bessel_k(nu, x);
            assert!(((got - expected) / expected).abs() < 1e-10, "K_{nu}({x}) = {got}, expected {expected}");
        }
    }

    #[test]
    fn normalization_at_zero() {
        for nu in [0.5, 1.0, 1.5, 2.5, 3.7] {
            assert_eq!(matern_full(0.0, 2.0, nu), 1.0);
        }
    }

    #[test]
    fn exponential_at_half() {
        let cfg = KernelConfig { nu: 0.5, lengthscale: 1.7, ..KernelConfig::default() };
        for k in 0..100 {
            let s = cfg.support_radius() * k as f64 / 99.0;
            assert!((matern(s, &cfg) - (-s / cfg.lengthscale).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_forms_match_bessel_route() {
        // Half-integer closed forms against the general Bessel expression.
        for nu in [0.5, 1.5, 2.5] {
            for s in [0.05, 0.5, 1.0, 2.0, 5.0] {
                let l = 1.3;
                let a = (2.0f64 * nu).sqrt() * s / l;
                let general = a.powf(nu) * bessel_k(nu, a) / (gamma(nu) * 2f64.powf(nu - 1.0));
                assert!((matern_full(s, l, nu) - general).abs() < 1e-10, "nu {nu} s {s}");
            }
        }
        // nu = 3/2 at s = l.
        let expected = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
        assert!((matern_full(1.0, 1.0, 1.5) - expected).abs() < 1e-15);
    }

    #[test]
    fn truncation() {
        let cfg = KernelConfig::default();
        assert!(matern(cfg.support_radius(), &cfg) > 0.0);
        assert_eq!(matern(cfg.support_radius() * (1.0 + 1e-12), &cfg), 0.0);
    }

    #[test]
    fn monotone_on_support() {
        for nu in [0.5, 1.5, 2.5] {
            let cfg = KernelConfig { nu, ..KernelConfig::default() };
            let vals: Vec<f64> = (0..=400).map(|k| matern(cfg.support_radius() * k as f64 / 400.0, &cfg)).collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn general_nu_is_monotone_and_bounded() {
        let vals: Vec<f64> = (0..200).map(|k| matern_full(k as f64 * 0.05, 1.0, 1.2)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
