//! Penalty families (L1, SCAD, MCP), their derivatives, and the local
//! quadratic approximation used by both coordinate-descent layers.
//!
//! All families are normalized so that the derivative at the origin equals the
//! tuning parameter, i.e. `rho'(0+) = 1` where `rho(t) = P(t) / tau`. With
//! that normalization the moment-selection cutoff on the multiplier penalty is
//! the tuning parameter itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Default SCAD shape parameter `a`.
pub const SCAD_DEFAULT_SHAPE: f64 = 3.7;
/// Default MCP shape parameter `gamma`.
pub const MCP_DEFAULT_SHAPE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyFamily {
    L1,
    Scad,
    Mcp,
}

#[derive(Debug, Error)]
pub enum PenaltyError {
    #[error("tuning parameter tau must be nonnegative and finite, got {0}")]
    InvalidTau(f64),
    #[error("SCAD shape must be > 2, got {0}")]
    InvalidScadShape(f64),
    #[error("MCP shape must be > 1, got {0}")]
    InvalidMcpShape(f64),
    #[error("penalty evaluated at negative argument t = {0}")]
    NegativeArgument(f64),
    #[error("penalty derivative evaluated at nonpositive argument t = {0}")]
    NonPositiveArgument(f64),
}

/// A penalty family together with its tuning parameter and shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec<F> {
    pub family: PenaltyFamily,
    /// Tuning parameter (`pi` on the parameters, `nu` on the multipliers).
    pub tau: F,
    /// SCAD `a` or MCP `gamma`; ignored for L1.
    pub shape: F,
}

impl<F: Real> PenaltySpec<F> {
    pub fn new(family: PenaltyFamily, tau: F, shape: F) -> Result<Self, PenaltyError> {
        let spec = PenaltySpec { family, tau, shape };
        spec.validate()?;
        Ok(spec)
    }

    pub fn l1(tau: F) -> Result<Self, PenaltyError> {
        Self::new(PenaltyFamily::L1, tau, F::one())
    }

    pub fn scad(tau: F) -> Result<Self, PenaltyError> {
        Self::new(PenaltyFamily::Scad, tau, F::of(SCAD_DEFAULT_SHAPE))
    }

    pub fn mcp(tau: F) -> Result<Self, PenaltyError> {
        Self::new(PenaltyFamily::Mcp, tau, F::of(MCP_DEFAULT_SHAPE))
    }

    pub fn validate(&self) -> Result<(), PenaltyError> {
        if !(self.tau >= F::zero()) || !self.tau.is_finite() {
            return Err(PenaltyError::InvalidTau(self.tau.as_f64()));
        }
        match self.family {
            PenaltyFamily::L1 => {}
            PenaltyFamily::Scad => {
                if !(self.shape > F::of(2.0)) {
                    return Err(PenaltyError::InvalidScadShape(self.shape.as_f64()));
                }
            }
            PenaltyFamily::Mcp => {
                if !(self.shape > F::one()) {
                    return Err(PenaltyError::InvalidMcpShape(self.shape.as_f64()));
                }
            }
        }
        Ok(())
    }

    /// Same family and shape with a different tuning parameter.
    pub fn with_tau(&self, tau: F) -> Self {
        PenaltySpec { family: self.family, tau, shape: self.shape }
    }
}

/// `P_tau(t)` for `t >= 0`.
pub fn penalty_value<F: Real>(spec: &PenaltySpec<F>, t: F) -> Result<F, PenaltyError> {
    if t < F::zero() {
        return Err(PenaltyError::NegativeArgument(t.as_f64()));
    }
    let tau = spec.tau;
    if tau == F::zero() {
        return Ok(F::zero());
    }
    let two = F::of(2.0);
    Ok(match spec.family {
        PenaltyFamily::L1 => tau * t,
        PenaltyFamily::Scad => {
            let a = spec.shape;
            if t <= tau {
                tau * t
            } else if t <= a * tau {
                (two * a * tau * t - t * t - tau * tau) / (two * (a - F::one()))
            } else {
                (a + F::one()) * tau * tau / two
            }
        }
        PenaltyFamily::Mcp => {
            let gamma = spec.shape;
            if t <= gamma * tau {
                tau * t - t * t / (two * gamma)
            } else {
                gamma * tau * tau / two
            }
        }
    })
}

/// `P_tau'(t)` for `t > 0`.
pub fn penalty_derivative<F: Real>(spec: &PenaltySpec<F>, t: F) -> Result<F, PenaltyError> {
    if !(t > F::zero()) {
        return Err(PenaltyError::NonPositiveArgument(t.as_f64()));
    }
    let tau = spec.tau;
    if tau == F::zero() {
        return Ok(F::zero());
    }
    Ok(match spec.family {
        PenaltyFamily::L1 => tau,
        PenaltyFamily::Scad => {
            let a = spec.shape;
            if t <= tau {
                tau
            } else if t < a * tau {
                (a * tau - t) / (a - F::one())
            } else {
                F::zero()
            }
        }
        PenaltyFamily::Mcp => (tau - t / spec.shape).max(F::zero()),
    })
}

/// Local quadratic approximation coefficient around `t0`:
/// `P'(|t|) ~= c * t` and `P''(|t|) ~= c` with `c = P'(m)/m`,
/// `m = max(|t0|, clamp)`. Clamping at the hard-threshold level keeps the
/// coefficient finite at the origin.
pub fn lqa_coefficient<F: Real>(
    spec: &PenaltySpec<F>,
    t0: F,
    clamp: F,
) -> Result<F, PenaltyError> {
    assert!(clamp > F::zero(), "lqa clamp must be positive");
    if spec.tau == F::zero() {
        return Ok(F::zero());
    }
    let m = t0.abs().max(clamp);
    Ok(penalty_derivative(spec, m)? / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specs() -> Vec<PenaltySpec<f64>> {
        vec![
            PenaltySpec::l1(0.5).unwrap(),
            PenaltySpec::scad(1.0).unwrap(),
            PenaltySpec::mcp(0.8).unwrap(),
        ]
    }

    #[test]
    fn l1_value() {
        let spec = PenaltySpec::<f64>::l1(0.5).unwrap();
        assert_eq!(penalty_value(&spec, 2.0).unwrap(), 1.0);
    }

    #[test]
    fn zero_at_origin_for_all_families() {
        for spec in specs() {
            assert_eq!(penalty_value(&spec, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn scad_flat_region_value() {
        let spec = PenaltySpec::<f64>::scad(1.0).unwrap();
        // (a + 1) tau^2 / 2 with a = 3.7
        assert!((penalty_value(&spec, 3.7).unwrap() - 2.35).abs() < 1e-12);
        assert!((penalty_value(&spec, 10.0).unwrap() - 2.35).abs() < 1e-12);
    }

    #[test]
    fn scad_derivative_regions() {
        let spec = PenaltySpec::<f64>::scad(1.0).unwrap();
        assert!((penalty_derivative(&spec, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let mid = penalty_derivative(&spec, 2.0).unwrap();
        assert!((mid - (3.7 - 2.0) / 2.7).abs() < 1e-12);
        assert_eq!(penalty_derivative(&spec, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn negative_argument_is_a_domain_error() {
        let spec = PenaltySpec::<f64>::l1(0.5).unwrap();
        assert!(penalty_value(&spec, -0.1).is_err());
        assert!(penalty_derivative(&spec, 0.0).is_err());
        assert!(penalty_derivative(&spec, -1.0).is_err());
    }

    #[test]
    fn lqa_examples() {
        let l1 = PenaltySpec::<f64>::l1(0.5).unwrap();
        assert!((lqa_coefficient(&l1, 2.0, 1e-3).unwrap() - 0.25).abs() < 1e-12);
        assert!((lqa_coefficient(&l1, 0.0, 1e-3).unwrap() - 500.0).abs() < 1e-9);
        let scad = PenaltySpec::<f64>::scad(1.0).unwrap();
        assert_eq!(lqa_coefficient(&scad, 5.0, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn value_nondecreasing_on_grid() {
        for spec in specs() {
            let hi = 10.0 * spec.tau;
            let mut prev = 0.0;
            for i in 0..=1000 {
                let t = hi * (i as f64) / 1000.0;
                let v = penalty_value(&spec, t).unwrap();
                assert!(v + 1e-14 >= prev, "{:?} not nondecreasing at t={}", spec.family, t);
                prev = v;
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let h = 1e-5;
        for spec in specs() {
            let tau = spec.tau;
            // kink points to skip: tau and shape*tau (SCAD), shape*tau (MCP)
            let kinks = [tau, spec.shape * tau];
            for i in 1..400 {
                let t = 10.0 * tau * (i as f64) / 400.0;
                if kinks.iter().any(|k| (t - k).abs() < 10.0 * h) {
                    continue;
                }
                let fd = (penalty_value(&spec, t + h).unwrap()
                    - penalty_value(&spec, t - h).unwrap())
                    / (2.0 * h);
                let d = penalty_derivative(&spec, t).unwrap();
                assert!((fd - d).abs() <= 1e-6, "{:?} at t={}: fd={} d={}", spec.family, t, fd, d);
            }
        }
    }

    #[test]
    fn normalized_slope_at_origin() {
        // rho'(0+) = P'(0+)/tau = 1 for every family.
        for spec in specs() {
            let d = penalty_derivative(&spec, 1e-12).unwrap();
            assert!((d / spec.tau - 1.0).abs() < 1e-9, "{:?}", spec.family);
        }
    }

    proptest! {
        #[test]
        fn rho_is_nondecreasing(tau in 0.01f64..3.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for spec in [
                PenaltySpec::l1(tau).unwrap(),
                PenaltySpec::scad(tau).unwrap(),
                PenaltySpec::mcp(tau).unwrap(),
            ] {
                let vlo = penalty_value(&spec, lo).unwrap();
                let vhi = penalty_value(&spec, hi).unwrap();
                prop_assert!(vhi + 1e-12 >= vlo);
            }
        }
    }
}
