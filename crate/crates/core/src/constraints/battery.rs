//! Battery degradation surrogate.
//!
//! Trajectories are `[T, 4]` with columns `(T~, C~, SOH, cycle)`, where
//! `T~ = (T_K - t_ref_k) / t_scale` and `C~ = C / c_nominal`.

use serde::{Deserialize, Serialize};

use super::ViolationReport;
use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const KELVIN: f64 = 273.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryPack {
    /// Activation energy, J/mol.
    pub ea: f64,
    /// Gas constant, J/(mol K).
    pub r_gas: f64,
    pub t_min_c: f64,
    pub t_max_c: f64,
    /// Coefficient of the fade-versus-sqrt(cycle) law.
    pub alpha_sqrt: f64,
    /// Ah.
    pub c_nominal: f64,
    pub t_ref_k: f64,
    pub t_scale: f64,
}

impl Default for BatteryPack {
    fn default() -> Self {
        Self {
            ea: 11600.0,
            r_gas: 8.314,
            t_min_c: -10.0,
            t_max_c: 60.0,
            alpha_sqrt: 0.01,
            c_nominal: 2.0,
            t_ref_k: 298.15,
            t_scale: 10.0,
        }
    }
}

struct Cols {
    temp: Vec<f64>,
    cap: Vec<f64>,
    soh: Vec<f64>,
    cycle: Vec<f64>,
}

fn columns(traj: &Tensor<f64>) -> Result<Cols> {
    let s = traj.shape();
    if s.len() != 2 || s[1] != 4 || s[0] < 2 {
        return Err(Error::invalid(format!("battery trajectory must be [T >= 2, 4], got {s:?}")));
    }
    let col = |c: usize| traj.data().iter().skip(c).step_by(4).copied().collect::<Vec<_>>();
    Ok(Cols {
        temp: col(0),
        cap: col(1),
        soh: col(2),
        cycle: col(3),
    })
}

impl BatteryPack {
    pub fn validate(&self) -> Result<()> {
        let pos = [self.ea, self.r_gas, self.c_nominal, self.t_ref_k, self.t_scale];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.t_min_c < self.t_max_c) || !(self.alpha_sqrt >= 0.0) {
            return Err(Error::Config(format!("invalid battery pack {self:?}")));
        }
        Ok(())
    }

    pub fn kelvin(&self, t_norm: f64) -> f64 {
        t_norm * self.t_scale + self.t_ref_k
    }

    pub fn normalize_temp(&self, t_k: f64) -> f64 {
        (t_k - self.t_ref_k) / self.t_scale
    }

    /// Arrhenius fade rate `A exp(-Ea / (R T))` in Ah per cycle.
    pub fn fade_rate(&self, prefactor: f64, t_k: f64) -> Result<f64> {
        if !(t_k > 0.0) {
            return Err(Error::invalid(format!("Arrhenius term needs positive Kelvin temperature, got {t_k}")));
        }
        Ok(prefactor * (-self.ea / (self.r_gas * t_k)).exp())
    }

    /// Per-level violation magnitudes averaged over the trajectory.
    ///
    /// Level 2 is `dC/dn + A exp(-Ea / (R T))` by forward difference,
    /// relative to `c_nominal`. Temperature excursions in level 3 are
    /// measured relative to the admissible span.
    pub fn violations(&self, traj: &Tensor<f64>, prefactor: f64) -> Result<ViolationReport> {
        let c = columns(traj)?;
        let n = c.temp.len();
        let e = |i: usize| 0.5 * c.temp[i] * c.temp[i] + c.cap[i] * c.cap[i];
        let e0 = e(0);
        let phi1 = (0..n).map(|i| (e(i) - e0).abs()).sum::<f64>() / n as f64;

        let mut phi2 = 0.0;
        for i in 0..n - 1 {
            let dn = c.cycle[i + 1] - c.cycle[i];
            if !(dn > 0.0) {
                return Err(Error::invalid(format!("cycle index must increase, step {i} has {dn}")));
            }
            let dc = (c.cap[i + 1] - c.cap[i]) * self.c_nominal / dn;
            phi2 += (dc + self.fade_rate(prefactor, self.kelvin(c.temp[i]))?).abs() / self.c_nominal;
        }
        phi2 /= (n - 1) as f64;

        let span = self.t_max_c - self.t_min_c;
        let phi3 = (0..n)
            .map(|i| {
                let tc = self.kelvin(c.temp[i]) - KELVIN;
                (-c.soh[i]).max(0.0)
                    + (c.soh[i] - 1.0).max(0.0)
                    + (tc - self.t_max_c).max(0.0) / span
                    + (self.t_min_c - tc).max(0.0) / span
            })
            .sum::<f64>()
            / n as f64;

        let c0 = c.cap[0];
        if c0 == 0.0 {
            return Err(Error::invalid("battery trajectory starts at zero capacity"));
        }
        let phi4 = (0..n)
            .map(|i| {
                let fade = 1.0 - c.cap[i] / c0;
                (fade - self.alpha_sqrt * (c.cycle[i] - c.cycle[0]).max(0.0).sqrt()).abs()
            })
            .sum::<f64>()
            / n as f64;
        Ok(ViolationReport::new([phi1, phi2, phi3, phi4]))
    }

    /// Differentiable per-level signals for a `[B, 4, T]` batch in pack units.
    ///
    /// Returns the energy-like invariant `[B,1,T]`, the Arrhenius residual
    /// `[B,1,T-1]`, the box slack `[B,1,T]` and the sqrt-law deviation `[B,1,T]`.
    pub fn signals<'t, S: Scalar>(&self, x: &Var<'t, S>, prefactor: &[f64]) -> Result<[Var<'t, S>; 4]> {
        let s = x.shape();
        if s.len() != 3 || s[1] != 4 || s[0] != prefactor.len() || s[2] < 2 {
            return Err(Error::invalid(format!(
                "battery signals need [B, 4, T >= 2] with B = {} condition rows, got {s:?}",
                prefactor.len()
            )));
        }
        let (b, t) = (s[0], s[2]);
        let tape = x.tape();
        let temp = x.slice(1, 0, 1)?;
        let cap = x.slice(1, 1, 1)?;
        let soh = x.slice(1, 2, 1)?;
        let cycle = x.slice(1, 3, 1)?;

        let inv = temp.square()?.scale(0.5)?.add(&cap.square()?)?;

        // exp(-Ea / (R T_K)); T_K is clamped away from zero so the reciprocal stays finite.
        let tk = temp.slice(2, 0, t - 1)?.scale(self.t_scale)?.offset(self.t_ref_k)?.relu()?.offset(1e-6)?;
        let arr = tk.recip()?.scale(-self.ea / self.r_gas)?.exp()?;
        let pref = tape.constant(Tensor::from_f64(&[b, 1, 1], &prefactor.iter().map(|a| a / self.c_nominal).collect::<Vec<_>>())?);
        let dc = cap.slice(2, 1, t - 1)?.sub(&cap.slice(2, 0, t - 1)?)?;
        let arrhenius = dc.add(&arr.mul(&pref)?)?;

        let span = self.t_max_c - self.t_min_c;
        let tc = temp.scale(self.t_scale)?.offset(self.t_ref_k - KELVIN)?;
        let slack = soh
            .neg()?
            .relu()?
            .add(&soh.offset(-1.0)?.relu()?)?
            .add(&tc.offset(-self.t_max_c)?.relu()?.scale(1.0 / span)?)?
            .add(&tc.neg()?.offset(self.t_min_c)?.relu()?.scale(1.0 / span)?)?;

        let c0 = cap.slice(2, 0, 1)?;
        let fade = cap.mul(&c0.recip()?)?.neg()?.offset(1.0)?;
        let n0 = cycle.slice(2, 0, 1)?;
        let law = cycle.sub(&n0)?.relu()?.offset(1e-12)?.sqrt()?.scale(self.alpha_sqrt)?;
        let sqrt_dev = fade.sub(&law)?;
        Ok([inv, arrhenius, slack, sqrt_dev])
    }
}
