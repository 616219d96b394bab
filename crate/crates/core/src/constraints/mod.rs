//! Hierarchical constraint schedules, level losses and domain packs.

pub mod battery;
pub mod oscillator;
mod schedule;

pub use battery::BatteryPack;
pub use oscillator::OscillatorPack;
pub use schedule::ConstraintSchedule;

use serde::{Deserialize, Serialize};

use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of the per-level violation scores in `Phi_total`.
pub const PHI_WEIGHTS: [f64; 4] = [0.4, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub phi: [f64; 4],
    pub total: f64,
}

impl ViolationReport {
    pub fn new(phi: [f64; 4]) -> Self {
        let total = phi.iter().zip(PHI_WEIGHTS).map(|(p, w)| p * w).sum();
        Self { phi, total }
    }
}

/// Level-`i` discrepancy between a constraint signal and an operator's signal.
pub fn level_loss<'t, S: Scalar>(pred: &Var<'t, S>, target: &Var<'t, S>) -> Result<Var<'t, S>> {
    pred.mse(target)
}

/// Mismatch between the integrated operator output and the flow's lookahead state.
pub fn consistency_loss<'t, S: Scalar>(u_fno: &Var<'t, S>, lookahead: &Var<'t, S>) -> Result<Var<'t, S>> {
    u_fno.mse(lookahead)
}

/// Constraint pack of one application domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "domain", rename_all = "snake_case")]
pub enum DomainPack {
    Oscillator(OscillatorPack),
    Battery(BatteryPack),
}

impl DomainPack {
    pub fn state_dim(&self) -> usize {
        match self {
            Self::Oscillator(_) => 2,
            Self::Battery(_) => 4,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            Self::Oscillator(_) => 3,
            Self::Battery(_) => 2,
        }
    }

    /// Condition coordinate read by the pack: damping for the oscillator,
    /// Arrhenius prefactor for the battery.
    pub fn cond_param(&self, cond: &[f64]) -> Result<f64> {
        if cond.len() != self.cond_dim() {
            return Err(Error::invalid(format!(
                "condition has {} entries, pack expects {}",
                cond.len(),
                self.cond_dim()
            )));
        }
        Ok(match self {
            Self::Oscillator(_) => cond[0],
            Self::Battery(_) => cond[1],
        })
    }

    /// Scores of a single `[T, D]` trajectory in physical units.
    pub fn violations(&self, traj: &Tensor<f64>, cond: &[f64]) -> Result<ViolationReport> {
        let p = self.cond_param(cond)?;
        match self {
            Self::Oscillator(o) => o.violations(traj, p),
            Self::Battery(b) => b.violations(traj, p),
        }
    }

    /// Differentiable level signals of a `[B, D, T]` batch in physical units;
    /// `conds` holds one raw condition row per batch row.
    pub fn signals<'t, S: Scalar>(&self, x: &Var<'t, S>, conds: &[Vec<f64>]) -> Result<[Var<'t, S>; 4]> {
        let p = conds.iter().map(|c| self.cond_param(c)).collect::<Result<Vec<_>>>()?;
        match self {
            Self::Oscillator(o) => o.signals(x, &p),
            Self::Battery(b) => b.signals(x, &p),
        }
    }
}

/// Scalar loss components of one training objective evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cfm: f64,
    pub levels: [f64; 4],
    pub guidance: f64,
    pub consist: f64,
}

impl LossComponents {
    fn check(&self) -> Result<()> {
        let all = [self.cfm, self.guidance, self.consist].into_iter().chain(self.levels);
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("loss components must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `L_cfm + sum_i lambda_i(t) L_i + L_guidance + beta_consist L_consist`.
pub fn total_loss(c: &LossComponents, t: f64, sched: &ConstraintSchedule) -> Result<f64> {
    c.check()?;
    let lambdas = sched.lambdas(t);
    let levels: f64 = lambdas.iter().zip(c.levels).map(|(l, v)| l * v).sum();
    Ok(c.cfm + levels + c.guidance + sched.beta_consist * c.consist)
}

/// Batch objective when every row carries its own flow time: the mean of
/// per-row totals.
pub fn total_loss_rows(rows: &[LossComponents], t: &[f64], sched: &ConstraintSchedule) -> Result<f64> {
    if rows.len() != t.len() || rows.is_empty() {
        return Err(Error::invalid(format!(
            "total_loss_rows: {} component rows for {} times",
            rows.len(),
            t.len()
        )));
    }
    let mut acc = 0.0;
    for (r, &ti) in rows.iter().zip(t) {
        acc += total_loss(r, ti, sched)?;
    }
    Ok(acc / rows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{Tape, Tensor};
    use crate::testutil::rand_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn total_loss_examples() {
        let s = ConstraintSchedule::default();
        assert_eq!(total_loss(&LossComponents::default(), 0.3, &s).unwrap(), 0.0);
        let only = LossComponents {
            cfm: 2.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&only, 0.8, &s).unwrap(), 2.0);
        let ones = ConstraintSchedule {
            lambda_base: [1.0; 4],
            ..Default::default()
        };
        let (a, b, c, d) = (0.7, 1.3, 2.1, 0.4);
        let comp = LossComponents {
            cfm: 1.0,
            levels: [a, b, c, d],
            guidance: 1.0,
            consist: 1.0,
        };
        let expect = 1.0 + a + (-2.5f64).exp() * b + 0.0 * c + 0.0 * d + 1.0 + 0.5;
        assert!((total_loss(&comp, 0.0, &ones).unwrap() - expect).abs() < 1e-15);
        let neg = LossComponents {
            guidance: -1.0,
            ..Default::default()
        };
        assert!(total_loss(&neg, 0.5, &s).is_err());
    }

    #[test]
    fn phi_total_weights() {
        let r = ViolationReport::new([1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.total, 0.4);
        let r = ViolationReport::new([1.0, 1.0, 1.0, 1.0]);
        assert!((r.total - 1.0).abs() < 1e-15);
        assert_eq!(ViolationReport::new([0.0, 0.0, 0.0, 2.0]).total, 0.2);
    }

    #[test]
    fn level_and_consistency_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let a = tape.constant(rand_tensor::<f64>(&mut rng, &[3, 4]));
        assert_eq!(level_loss(&a, &a).unwrap().item(), 0.0);
        assert!((level_loss(&a.offset(1.0).unwrap(), &a).unwrap().item() - 1.0).abs() < 1e-12);
        assert!((consistency_loss(&a.offset(3.0).unwrap(), &a).unwrap().item() - 9.0).abs() < 1e-12);
        let b = tape.constant(Tensor::zeros(&[4, 3]));
        assert!(level_loss(&a, &b).is_err());
    }

    fn comps() -> impl Strategy<Value = LossComponents> {
        (0.0f64..10.0, prop::array::uniform4(0.0f64..10.0), 0.0f64..10.0, 0.0f64..10.0).prop_map(
            |(cfm, levels, guidance, consist)| LossComponents {
                cfm,
                levels,
                guidance,
                consist,
            },
        )
    }

    proptest! {
        #[test]
        fn total_loss_monotone_in_every_component(c in comps(), t in 0.0f64..1.0, which in 0usize..7, bump in 0.0f64..5.0) {
            let s = ConstraintSchedule::default();
            let mut d = c;
            match which {
                0 => d.cfm += bump,
                1..=4 => d.levels[which - 1] += bump,
                5 => d.guidance += bump,
                _ => d.consist += bump,
            }
            prop_assert!(total_loss(&d, t, &s).unwrap() >= total_loss(&c, t, &s).unwrap());
        }

        #[test]
        fn phi_total_is_linear(p in prop::array::uniform4(0.0f64..3.0), q in prop::array::uniform4(0.0f64..3.0), a in 0.0f64..4.0) {
            let mix: [f64; 4] = std::array::from_fn(|i| p[i] + a * q[i]);
            let lhs = ViolationReport::new(mix).total;
            let rhs = ViolationReport::new(p).total + a * ViolationReport::new(q).total;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
