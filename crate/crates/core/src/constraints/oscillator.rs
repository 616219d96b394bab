//! Damped harmonic oscillator: energy, equation of motion, amplitude box and
//! energy-decay envelope.
//!
//! Trajectories are `[T, 2]` tensors of (position, velocity) sampled every
//! `dt`. Time derivatives use the fourth-order central stencil on interior
//! points, so residual series are four samples shorter than the input.

use serde::{Deserialize, Serialize};

use super::ViolationReport;
use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillatorPack {
    pub mass: f64,
    pub stiffness: f64,
    pub dt: f64,
    pub x_bound: f64,
}

impl Default for OscillatorPack {
    fn default() -> Self {
        Self {
            mass: 1.0,
            stiffness: 1.0,
            dt: 0.1,
            x_bound: 2.25,
        }
    }
}

const FLOOR: f64 = 1e-12;

fn columns(traj: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = traj.shape();
    if s.len() != 2 || s[1] != 2 {
        return Err(Error::invalid(format!("oscillator trajectory must be [T, 2], got {s:?}")));
    }
    let d = traj.data();
    Ok((d.iter().step_by(2).copied().collect(), d.iter().skip(1).step_by(2).copied().collect()))
}

/// Interior derivative of `f`: five-point stencil when `T >= 5`, three-point otherwise.
fn derivative(f: &[f64], dt: f64) -> Result<(Vec<f64>, usize)> {
    let n = f.len();
    if n < 3 {
        return Err(Error::invalid(format!("central difference needs T >= 3, got {n}")));
    }
    if n < 5 {
        return Ok(((1..n - 1).map(|i| (f[i + 1] - f[i - 1]) / (2.0 * dt)).collect(), 1));
    }
    let d = (2..n - 2)
        .map(|i| (-f[i + 2] + 8.0 * f[i + 1] - 8.0 * f[i - 1] + f[i - 2]) / (12.0 * dt))
        .collect();
    Ok((d, 2))
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl OscillatorPack {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mass", self.mass), ("stiffness", self.stiffness), ("dt", self.dt), ("x_bound", self.x_bound)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("oscillator {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn energy(&self, x: f64, v: f64) -> f64 {
        0.5 * self.mass * v * v + 0.5 * self.stiffness * x * x
    }

    pub fn energy_series(&self, traj: &Tensor<f64>) -> Result<Vec<f64>> {
        let (x, v) = columns(traj)?;
        Ok(x.iter().zip(&v).map(|(&a, &b)| self.energy(a, b)).collect())
    }

    /// Cumulative work done by the damping force, trapezoidal in time.
    pub fn dissipated_work(&self, traj: &Tensor<f64>, gamma: f64) -> Result<Vec<f64>> {
        let (_, v) = columns(traj)?;
        let mut w = Vec::with_capacity(v.len());
        let mut acc = 0.0;
        for i in 0..v.len() {
            if i > 0 {
                acc += 0.5 * gamma * (v[i] * v[i] + v[i - 1] * v[i - 1]) * self.dt;
            }
            w.push(acc);
        }
        Ok(w)
    }

    /// Mean relative violation of `E(t) + W(t) = E(0)`, where `W` is the
    /// dissipated work. With `gamma = 0` this is the relative energy drift.
    pub fn energy_balance_error(&self, traj: &Tensor<f64>, gamma: f64) -> Result<f64> {
        let e = self.energy_series(traj)?;
        let w = self.dissipated_work(traj, gamma)?;
        let e0 = e.first().copied().ok_or_else(|| Error::invalid("empty trajectory"))?;
        let denom = e0.max(FLOOR);
        Ok(e.iter().zip(&w).map(|(ei, wi)| (ei + wi - e0).abs() / denom).sum::<f64>() / e.len() as f64)
    }

    /// `a + (k/m) x + (gamma/m) v` on interior points, with `a` differentiated from `v`.
    pub fn eom_residual(&self, traj: &Tensor<f64>, gamma: f64) -> Result<Vec<f64>> {
        let (x, v) = columns(traj)?;
        let (a, off) = derivative(&v, self.dt)?;
        let (k, g) = (self.stiffness / self.mass, gamma / self.mass);
        Ok(a.iter().enumerate().map(|(j, aj)| aj + k * x[j + off] + g * v[j + off]).collect())
    }

    /// `dx/dt - v` on interior points.
    pub fn kinematic_residual(&self, traj: &Tensor<f64>) -> Result<Vec<f64>> {
        let (x, v) = columns(traj)?;
        let (dx, off) = derivative(&x, self.dt)?;
        Ok(dx.iter().enumerate().map(|(j, d)| d - v[j + off]).collect())
    }

    pub fn bound_slack(&self, traj: &Tensor<f64>) -> Result<Vec<f64>> {
        let (x, _) = columns(traj)?;
        Ok(x.iter().map(|xi| (xi.abs() - self.x_bound).max(0.0)).collect())
    }

    /// `E(t) - E(0) exp(-gamma t / m)`.
    pub fn envelope_deviation(&self, traj: &Tensor<f64>, gamma: f64) -> Result<Vec<f64>> {
        let e = self.energy_series(traj)?;
        let e0 = e.first().copied().ok_or_else(|| Error::invalid("empty trajectory"))?;
        Ok(e.iter()
            .enumerate()
            .map(|(i, ei)| ei - e0 * (-gamma * i as f64 * self.dt / self.mass).exp())
            .collect())
    }

    /// Dimensionless per-level scores.
    ///
    /// * level 1: relative energy-balance error;
    /// * level 2: RMS of the dynamic and kinematic residuals, each relative
    ///   to the RMS of the term it should cancel, averaged;
    /// * level 3: mean bound slack relative to `x_bound`;
    /// * level 4: mean absolute envelope deviation relative to `E(0)`.
    pub fn violations(&self, traj: &Tensor<f64>, gamma: f64) -> Result<ViolationReport> {
        let (x, v) = columns(traj)?;
        let phi1 = self.energy_balance_error(traj, gamma)?;
        let eom = self.eom_residual(traj, gamma)?;
        let kin = self.kinematic_residual(traj)?;
        let k = self.stiffness / self.mass;
        let ref_a = rms(&x.iter().map(|xi| k * xi).collect::<Vec<_>>()).max(FLOOR);
        let ref_v = rms(&v).max(FLOOR);
        let phi2 = 0.5 * (rms(&eom) / ref_a + rms(&kin) / ref_v);
        let phi3 = mean(&self.bound_slack(traj)?) / self.x_bound;
        let env = self.envelope_deviation(traj, gamma)?;
        let e0 = self.energy(x[0], v[0]).max(FLOOR);
        let phi4 = env.iter().map(|d| d.abs()).sum::<f64>() / env.len() as f64 / e0;
        Ok(ViolationReport::new([phi1, phi2, phi3, phi4]))
    }

    /// Closed-form underdamped solution on `t_len` samples.
    pub fn solve(&self, gamma: f64, x0: f64, v0: f64, t_len: usize) -> Result<Tensor<f64>> {
        let (m, k) = (self.mass, self.stiffness);
        let disc = k / m - gamma * gamma / (4.0 * m * m);
        if !(gamma >= 0.0) || !(disc > 0.0) {
            return Err(Error::invalid(format!("oscillator with gamma = {gamma} is not underdamped")));
        }
        let wd = disc.sqrt();
        let decay = gamma / (2.0 * m);
        let b = (v0 + decay * x0) / wd;
        let mut data = Vec::with_capacity(2 * t_len);
        for i in 0..t_len {
            let t = i as f64 * self.dt;
            let (s, c) = (wd * t).sin_cos();
            let e = (-decay * t).exp();
            let x = e * (x0 * c + b * s);
            let v = -decay * x + e * wd * (b * c - x0 * s);
            data.push(x);
            data.push(v);
        }
        Tensor::from_f64(&[t_len, 2], &data)
    }

    fn stencil<'t, S: Scalar>(&self, f: &Var<'t, S>, len: usize) -> Result<Var<'t, S>> {
        let n = len - 4;
        let s = |k: usize| f.slice(2, k, n);
        let num = s(3)?.sub(&s(1)?)?.scale(8.0)?.sub(&s(4)?.sub(&s(0)?)?)?;
        num.scale(1.0 / (12.0 * self.dt))
    }

    /// Differentiable constraint signals for a `[B, 2, T]` batch in physical units.
    ///
    /// Returns energy `[B,1,T]`, stacked dynamic/kinematic residuals `[B,2,T-4]`,
    /// bound slack `[B,1,T]` and envelope deviation `[B,1,T]`.
    pub fn signals<'t, S: Scalar>(&self, x: &Var<'t, S>, gamma: &[f64]) -> Result<[Var<'t, S>; 4]> {
        let s = x.shape();
        if s.len() != 3 || s[1] != 2 || s[0] != gamma.len() {
            return Err(Error::invalid(format!(
                "oscillator signals need [B, 2, T] with B = {} condition rows, got {s:?}",
                gamma.len()
            )));
        }
        let (b, t) = (s[0], s[2]);
        if t < 5 {
            return Err(Error::invalid(format!("oscillator signals need T >= 5, got {t}")));
        }
        let tape = x.tape();
        let pos = x.slice(1, 0, 1)?;
        let vel = x.slice(1, 1, 1)?;
        let energy = vel.square()?.scale(0.5 * self.mass)?.add(&pos.square()?.scale(0.5 * self.stiffness)?)?;

        let g = tape.constant(Tensor::from_f64(&[b, 1, 1], &gamma.iter().map(|g| g / self.mass).collect::<Vec<_>>())?);
        let inner = |v: &Var<'t, S>| v.slice(2, 2, t - 4);
        let acc = self.stencil(&vel, t)?;
        let eom = acc
            .add(&inner(&pos)?.scale(self.stiffness / self.mass)?)?
            .add(&inner(&vel)?.mul(&g)?)?;
        let kin = self.stencil(&pos, t)?.sub(&inner(&vel)?)?;
        let dyn_res = Var::concat(&[eom, kin], 1)?;

        let slack = pos.offset(-self.x_bound)?.relu()?.add(&pos.neg()?.offset(-self.x_bound)?.relu()?)?;

        let decay: Vec<f64> = (0..b * t)
            .map(|i| (-gamma[i / t] * (i % t) as f64 * self.dt / self.mass).exp())
            .collect();
        let decay = tape.constant(Tensor::from_f64(&[b, 1, t], &decay)?);
        let e0 = energy.slice(2, 0, 1)?;
        let envelope = energy.sub(&e0.mul(&decay)?)?;
        Ok([energy, dyn_res, slack, envelope])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;

    fn cos_traj(dt: f64, n: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..n)
            .flat_map(|i| {
                let t = i as f64 * dt;
                [t.cos(), -t.sin()]
            })
            .collect();
        Tensor::from_f64(&[n, 2], &data).unwrap()
    }

    #[test]
    fn analytic_cosine_conserves_energy() {
        let pack = OscillatorPack {
            dt: 0.01,
            ..Default::default()
        };
        let tr = cos_traj(0.01, 400);
        for e in pack.energy_series(&tr).unwrap() {
            assert!((e - 0.5).abs() < 1e-15);
        }
        let r = pack.eom_residual(&tr, 0.0).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-3));
        assert_eq!(pack.energy(1.0, 0.0), 0.5);
    }

    #[test]
    fn short_trajectories_rejected() {
        let pack = OscillatorPack::default();
        let tr = cos_traj(0.1, 2);
        assert!(pack.eom_residual(&tr, 0.0).is_err());
        assert_eq!(pack.eom_residual(&cos_traj(0.1, 3), 0.0).unwrap().len(), 1);
        assert!(pack.energy_series(&Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn damped_envelope_deviation_small() {
        let pack = OscillatorPack::default();
        for (x0, v0) in [(1.0, 0.0), (0.0, 1.0), (1.5, -1.0), (0.5, 1.5)] {
            let tr = pack.solve(0.3, x0, v0, 100).unwrap();
            let r = pack.violations(&tr, 0.3).unwrap();
            assert!(r.phi[3] < 0.05, "{:?}", r);
            assert!(r.total < 0.01, "{:?}", r);
        }
    }

    #[test]
    fn bound_slack_counts_excursions() {
        let pack = OscillatorPack {
            x_bound: 1.0,
            ..Default::default()
        };
        let tr = Tensor::from_f64(&[3, 2], &[0.5, 0.0, -1.5, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(pack.bound_slack(&tr).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn closed_form_rejects_overdamping() {
        let pack = OscillatorPack::default();
        assert!(pack.solve(2.5, 1.0, 0.0, 10).is_err());
        assert!(pack.solve(-0.1, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn tape_signals_match_plain_versions() {
        let pack = OscillatorPack {
            x_bound: 0.8,
            ..Default::default()
        };
        let gammas = [0.0, 0.4];
        let trajs: Vec<Tensor<f64>> = gammas
            .iter()
            .map(|&g| pack.solve(g, 1.0, 0.3, 30).unwrap())
            .collect();
        let mut batch = vec![0.0; 2 * 2 * 30];
        for (b, tr) in trajs.iter().enumerate() {
            for i in 0..30 {
                for ch in 0..2 {
                    batch[b * 60 + ch * 30 + i] = tr.data()[i * 2 + ch];
                }
            }
        }
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 2, 30], &batch).unwrap());
        let [e, d, s, env] = pack.signals(&x, &gammas).unwrap();
        for (b, tr) in trajs.iter().enumerate() {
            let g = gammas[b];
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&e.value().data()[b * 30..(b + 1) * 30], &pack.energy_series(tr).unwrap()));
            assert!(close(&s.value().data()[b * 30..(b + 1) * 30], &pack.bound_slack(tr).unwrap()));
            assert!(close(&env.value().data()[b * 30..(b + 1) * 30], &pack.envelope_deviation(tr, g).unwrap()));
            let dv = d.value();
            assert!(close(&dv.data()[b * 52..b * 52 + 26], &pack.eom_residual(tr, g).unwrap()));
            assert!(close(&dv.data()[b * 52 + 26..(b + 1) * 52], &pack.kinematic_residual(tr).unwrap()));
        }
        assert!(pack.signals(&x, &[0.0]).is_err());
    }
}
