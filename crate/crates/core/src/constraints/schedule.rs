use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Base weights and shape parameters of the per-level time schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSchedule {
    pub lambda_base: [f64; 4],
    pub beta1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub beta_consist: f64,
    /// Replace every shape function by the constant 1.
    pub flat: bool,
}

impl Default for ConstraintSchedule {
    fn default() -> Self {
        Self {
            lambda_base: [1.0, 0.5, 0.5, 0.1],
            beta1: 1.0,
            kappa2: 10.0,
            kappa3: 5.0,
            beta_consist: 0.5,
            flat: false,
        }
    }
}

impl ConstraintSchedule {
    /// No-constraint configuration: every level weight and the consistency weight are zero.
    pub fn off() -> Self {
        Self {
            lambda_base: [0.0; 4],
            beta_consist: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .lambda_base
            .iter()
            .chain([&self.beta1, &self.kappa2, &self.kappa3, &self.beta_consist]);
        for v in all {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Config(format!("schedule parameters must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Shape function of `level` at flow time `t`.
    pub fn phi(&self, level: usize, t: f64) -> Result<f64> {
        if !(1..=4).contains(&level) {
            return Err(Error::invalid(format!("schedule level must be 1..=4, got {level}")));
        }
        if self.flat {
            return Ok(1.0);
        }
        Ok(match level {
            1 => 1.0 + self.beta1 * t * t,
            2 => (-self.kappa2 * (t - 0.5) * (t - 0.5)).exp(),
            3 => 1.0 - (-self.kappa3 * t).exp(),
            _ => t,
        })
    }

    /// `lambda_base[level] * phi(level, t)`.
    pub fn lambda(&self, level: usize, t: f64) -> Result<f64> {
        Ok(self.lambda_base[level - 1] * self.phi(level, t)?)
    }

    pub fn lambdas(&self, t: f64) -> [f64; 4] {
        [1, 2, 3, 4].map(|l| self.lambda(l, t).expect("level in range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_functions_at_anchor_points() {
        let s = ConstraintSchedule::default();
        assert_eq!(s.phi(1, 0.0).unwrap(), 1.0);
        assert_eq!(s.phi(2, 0.5).unwrap(), 1.0);
        assert_eq!(s.phi(3, 0.0).unwrap(), 0.0);
        assert_eq!(s.phi(4, 0.5).unwrap(), 0.5);
        assert!(s.phi(0, 0.5).is_err());
        assert!(s.phi(5, 0.5).is_err());
    }

    #[test]
    fn flat_schedule_is_constant() {
        let s = ConstraintSchedule {
            flat: true,
            ..Default::default()
        };
        for l in 1..=4 {
            assert_eq!(s.phi(l, 0.13).unwrap(), 1.0);
        }
        assert_eq!(s.lambda(2, 0.9).unwrap(), 0.5);
    }

    #[test]
    fn negative_parameters_rejected() {
        let mut s = ConstraintSchedule::default();
        assert!(s.validate().is_ok());
        s.kappa3 = -1.0;
        assert!(s.validate().is_err());
    }
}
