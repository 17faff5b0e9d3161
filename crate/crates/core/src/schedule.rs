//! Unmasking schedules and their hazard rates.
//!
//! A schedule is a smooth monotone `alpha: [0,1] -> [0,1]` with
//! `alpha(0) = 0`, `alpha(1) = 1`; the hazard `alpha'(t) / (1 - alpha(t))`
//! is the instantaneous reveal rate of a still-masked coordinate and
//! diverges at t = 1.

use crate::error::{Error, Result};

/// Margin below t = 1 inside which hazard evaluation is rejected.
pub const HAZARD_T_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// alpha(t) = t.
    Linear,
    /// alpha(t) = t^exponent, exponent >= 1.
    Polynomial { exponent: f64 },
}

impl Schedule {
    pub fn polynomial(exponent: f64) -> Result<Self> {
        if !exponent.is_finite() || exponent < 1.0 {
            return Err(Error::Config(format!(
                "polynomial schedule exponent must be finite and >= 1, got {exponent}"
            )));
        }
        Ok(Schedule::Polynomial { exponent })
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match *self {
            Schedule::Linear => t,
            Schedule::Polynomial { exponent } => t.powf(exponent),
        }
    }

    pub fn alpha_prime(&self, t: f64) -> f64 {
        match *self {
            Schedule::Linear => 1.0,
            Schedule::Polynomial { exponent } => exponent * t.powf(exponent - 1.0),
        }
    }

    /// Inverse schedule: the t with alpha(t) = s.
    pub fn alpha_inv(&self, s: f64) -> f64 {
        match *self {
            Schedule::Linear => s,
            Schedule::Polynomial { exponent } => s.powf(1.0 / exponent),
        }
    }

    /// Hazard rate alpha'(t) / (1 - alpha(t)).
    ///
    /// Rejects t < 0 and t within `HAZARD_T_MARGIN` of 1, where the rate
    /// overflows.
    pub fn hazard(&self, t: f64) -> Result<f64> {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Domain(format!("hazard requires t in [0,1), got {t}")));
        }
        if t >= 1.0 - HAZARD_T_MARGIN {
            return Err(Error::Domain(format!(
                "hazard diverges at t = 1 (got t = {t})"
            )));
        }
        Ok(self.alpha_prime(t) / (1.0 - self.alpha(t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hazard_at_zero() {
        assert_eq!(Schedule::Linear.hazard(0.0).unwrap(), 1.0);
    }

    #[test]
    fn linear_hazard_at_half() {
        assert_eq!(Schedule::Linear.hazard(0.5).unwrap(), 2.0);
    }

    #[test]
    fn quadratic_hazard_at_half() {
        // 2t / (1 - t^2) at t = 0.5: 1.0 / 0.75 = 4/3.
        let s = Schedule::polynomial(2.0).unwrap();
        let h = s.hazard(0.5).unwrap();
        assert!((h - 4.0 / 3.0).abs() < 1e-15, "h = {h}");
    }

    #[test]
    fn hazard_domain_errors() {
        assert!(Schedule::Linear.hazard(-0.1).is_err());
        assert!(Schedule::Linear.hazard(1.0).is_err());
        assert!(Schedule::Linear.hazard(1.0 - 1e-13).is_err());
        assert!(Schedule::Linear.hazard(f64::NAN).is_err());
    }

    #[test]
    fn boundary_values() {
        for s in [Schedule::Linear, Schedule::polynomial(3.0).unwrap()] {
            assert_eq!(s.alpha(0.0), 0.0);
            assert_eq!(s.alpha(1.0), 1.0);
        }
    }

    #[test]
    fn polynomial_rejects_bad_exponent() {
        assert!(Schedule::polynomial(0.5).is_err());
        assert!(Schedule::polynomial(f64::NAN).is_err());
    }

    #[test]
    fn alpha_inv_roundtrip() {
        let s = Schedule::polynomial(2.5).unwrap();
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let back = s.alpha_inv(s.alpha(t));
            assert!((back - t).abs() < 1e-12);
        }
    }

    #[test]
    fn hazard_identity_and_monotonicity() {
        // hazard(t) * (1 - alpha(t)) == alpha'(t), and the linear hazard is
        // nondecreasing.
        let mut prev = 0.0;
        for schedule in [Schedule::Linear, Schedule::polynomial(2.0).unwrap()] {
            for i in 0..999 {
                let t = i as f64 / 1000.0;
                let h = schedule.hazard(t).unwrap();
                assert!(h >= 0.0);
                let lhs = h * (1.0 - schedule.alpha(t));
                let rhs = schedule.alpha_prime(t);
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0),
                    "identity failed at t={t}"
                );
                if schedule == Schedule::Linear {
                    assert!(h >= prev);
                    prev = h;
                }
            }
            prev = 0.0;
        }
    }
}
