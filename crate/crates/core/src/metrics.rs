//! Evaluation metrics and the report they roll up into.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constraints::{DomainPack, OscillatorPack};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Floor for `E(0)` in relative energy metrics.
pub const ENERGY_FLOOR: f64 = 1e-12;
/// Default `Phi_total` level above which a sample counts as violating.
pub const VIOLATION_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyError {
    pub value: f64,
    /// Set when `E(0)` fell below the floor and the value is relative to it.
    pub floored: bool,
}

fn energy_core(pack: &OscillatorPack, traj: &Tensor<f64>, gamma: f64) -> Result<EnergyError> {
    let e0 = pack.energy_series(traj)?[0];
    Ok(EnergyError {
        value: pack.energy_balance_error(traj, gamma)?,
        floored: e0 < ENERGY_FLOOR,
    })
}

/// Mean over time of `|E(t) - E(0)| / E(0)`.
pub fn energy_drift(traj: &Tensor<f64>, pack: &OscillatorPack) -> Result<EnergyError> {
    energy_core(pack, traj, 0.0)
}

/// Energy error net of the work done by damping, `|E + W - E(0)| / E(0)`.
/// Identical to [`energy_drift`] when `gamma = 0`.
pub fn energy_error(traj: &Tensor<f64>, pack: &OscillatorPack, gamma: f64) -> Result<EnergyError> {
    energy_core(pack, traj, gamma)
}

/// Linearly interpolated zero crossings with their direction (`true` = upward).
fn crossings(x: &[f64], dt: f64) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for i in 0..x.len().saturating_sub(1) {
        let (a, b) = (x[i], x[i + 1]);
        let up = a < 0.0 && b >= 0.0;
        let down = a > 0.0 && b <= 0.0;
        if up || down {
            let frac = a / (a - b);
            out.push(((i as f64 + frac) * dt, up));
        }
    }
    out
}

/// Angular frequency from a least-squares fit of crossing time on crossing
/// index; consecutive crossings are half a period apart.
fn fit_omega(c: &[(f64, bool)]) -> f64 {
    let n = c.len() as f64;
    let mk = (n - 1.0) / 2.0;
    let mt = c.iter().map(|p| p.0).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (k, p) in c.iter().enumerate() {
        let dk = k as f64 - mk;
        sxy += dk * (p.0 - mt);
        sxx += dk * dk;
    }
    PI / (sxy / sxx)
}

/// Phase `phi` of `A cos(omega t + phi)` as the circular mean over crossings.
fn crossing_phase(c: &[(f64, bool)], omega: f64) -> f64 {
    let (mut s, mut co) = (0.0, 0.0);
    for &(t, up) in c {
        let theta = if up { 1.5 * PI } else { 0.5 * PI };
        let phi = theta - omega * t;
        s += phi.sin();
        co += phi.cos();
    }
    s.atan2(co)
}

fn wrap(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Absolute phase offset in radians between two oscillatory signals sampled
/// at spacing `dt`. The frequency comes from the reference crossings and
/// each signal's phase from its own crossing times.
pub fn phase_error(gen: &[f64], reference: &[f64], dt: f64) -> Result<f64> {
    if gen.len() != reference.len() {
        return Err(Error::invalid(format!("phase_error length mismatch {} vs {}", gen.len(), reference.len())));
    }
    let cg = crossings(gen, dt);
    let cr = crossings(reference, dt);
    if cg.len() < 2 || cr.len() < 2 {
        return Err(Error::invalid("non-oscillatory input: fewer than 2 zero crossings"));
    }
    let omega = fit_omega(&cr);
    Ok(wrap(crossing_phase(&cg, omega) - crossing_phase(&cr, omega)).abs())
}

/// RMSE over the trailing `fraction` of time rows of two `[T, D]` trajectories.
pub fn long_rmse(gen: &Tensor<f64>, reference: &Tensor<f64>, fraction: f64) -> Result<f64> {
    if gen.shape() != reference.shape() || gen.rank() != 2 {
        return Err(Error::shape("long_rmse", gen.shape(), reference.shape()));
    }
    let (t, d) = (gen.shape()[0], gen.shape()[1]);
    let rows = if fraction.is_finite() && fraction > 0.0 {
        ((fraction.min(1.0) * t as f64).round() as usize).min(t)
    } else {
        0
    };
    if rows == 0 || d == 0 {
        return Err(Error::invalid(format!("long_rmse window is empty (fraction {fraction}, T = {t})")));
    }
    let start = (t - rows) * d;
    let sq: f64 = gen.data()[start..]
        .iter()
        .zip(&reference.data()[start..])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / (rows * d) as f64).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Unbiased squared MMD with an RBF kernel whose bandwidth is the median
/// pairwise distance over `X ∪ Y`.
///
/// Kernel sums are accumulated in sorted order so the estimator is exactly
/// symmetric in its arguments.
pub fn mmd(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid("mmd needs at least two samples per set"));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|s| s.len() != dim) {
        return Err(Error::invalid("mmd samples must share one dimension"));
    }
    let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            d.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    if !(median > 0.0) {
        return Err(Error::invalid("degenerate sample set: zero median pairwise distance"));
    }
    let inv = 1.0 / (2.0 * median * median);
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) * inv).exp();
    let within = |s: &[Vec<f64>]| {
        let mut v = Vec::with_capacity(s.len() * s.len());
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    v.push(k(&s[i], &s[j]));
                }
            }
        }
        let m = s.len() as f64;
        sorted_sum(v) / (m * (m - 1.0))
    };
    let mut cross = Vec::with_capacity(x.len() * y.len());
    for a in x {
        for b in y {
            cross.push(k(a, b));
        }
    }
    let kxy = sorted_sum(cross) / (x.len() * y.len()) as f64;
    let (kxx, kyy) = (within(x), within(y));
    // Order the two within-set terms canonically as well.
    let (lo, hi) = if kxx <= kyy { (kxx, kyy) } else { (kyy, kxx) };
    Ok(lo + hi - 2.0 * kxy)
}

/// Percentage of samples whose `Phi_total` exceeds `threshold`.
pub fn violation_rate(samples: &[Tensor<f64>], conds: &[Vec<f64>], pack: &DomainPack, threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("violation threshold must be positive, got {threshold}")));
    }
    if samples.is_empty() {
        return Err(Error::invalid("violation_rate over an empty sample set"));
    }
    if samples.len() != conds.len() {
        return Err(Error::invalid("one condition row per sample required"));
    }
    let mut hits = 0usize;
    for (s, c) in samples.iter().zip(conds) {
        if pack.violations(s, c)?.total > threshold {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<Regression> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::invalid(format!(
            "regression metrics need equal lengths >= 2, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::invalid("R^2 undefined: target has zero variance"));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum();
    let mae = pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    Ok(Regression {
        rmse: (ss_res / n).sqrt(),
        mae,
        r2: 1.0 - ss_res / ss_tot,
    })
}

/// Aggregate evaluation of a generated set against matched references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Oscillator only; `None` for other packs.
    pub energy_error: Option<f64>,
    pub phase_error: Option<f64>,
    /// Samples for which a phase could not be estimated.
    pub phase_skipped: usize,
    pub long_rmse: f64,
    pub long_fraction: f64,
    pub violation_rate: f64,
    pub violation_threshold: f64,
    pub phi_mean: [f64; 4],
    pub phi_total_mean: f64,
    pub mmd: Option<f64>,
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_secs: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_samples,energy_error,phase_error,phase_skipped,long_rmse,violation_rate,violation_threshold,phi1,phi2,phi3,phi4,phi_total,mmd,r2,rmse,mae,runtime_secs";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        format!(
            "{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{:?},{:?},{:?},{}",
            self.n_samples,
            opt(self.energy_error),
            opt(self.phase_error),
            self.phase_skipped,
            self.long_rmse,
            self.violation_rate,
            self.violation_threshold,
            self.phi_mean[0],
            self.phi_mean[1],
            self.phi_mean[2],
            self.phi_mean[3],
            self.phi_total_mean,
            opt(self.mmd),
            self.r2,
            self.rmse,
            self.mae,
            opt(self.runtime_secs)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub long_fraction: f64,
    pub with_mmd: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: VIOLATION_THRESHOLD,
            long_fraction: 0.5,
            with_mmd: true,
        }
    }
}

/// Scores `generated[i]` against `reference[i]` under condition `conds[i]`.
pub fn evaluate(
    generated: &[Tensor<f64>],
    reference: &[Tensor<f64>],
    conds: &[Vec<f64>],
    pack: &DomainPack,
    opts: &EvalOptions,
    runtime_secs: Option<f64>,
) -> Result<EvalReport> {
    let n = generated.len();
    if n == 0 || reference.len() != n || conds.len() != n {
        return Err(Error::invalid(format!(
            "evaluate needs matched non-empty sets, got {n} generated, {} reference, {} conditions",
            reference.len(),
            conds.len()
        )));
    }
    let mut phi = [0.0; 4];
    let mut total = 0.0;
    for (g, c) in generated.iter().zip(conds) {
        let r = pack.violations(g, c)?;
        for (a, b) in phi.iter_mut().zip(r.phi) {
            *a += b / n as f64;
        }
        total += r.total / n as f64;
    }
    let violation = violation_rate(generated, conds, pack, opts.threshold)?;

    let mut long = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        long += long_rmse(g, r, opts.long_fraction)? / n as f64;
    }

    let (mut energy, mut phase, mut skipped) = (None, None, 0);
    if let DomainPack::Oscillator(p) = pack {
        let mut e = 0.0;
        let (mut ph, mut counted) = (0.0, 0usize);
        for ((g, r), c) in generated.iter().zip(reference).zip(conds) {
            e += energy_error(g, p, pack.cond_param(c)?)?.value / n as f64;
            let xg: Vec<f64> = g.data().iter().step_by(2).copied().collect();
            let xr: Vec<f64> = r.data().iter().step_by(2).copied().collect();
            match phase_error(&xg, &xr, p.dt) {
                Ok(v) => {
                    ph += v;
                    counted += 1;
                }
                Err(_) => skipped += 1,
            }
        }
        energy = Some(e);
        phase = (counted > 0).then(|| ph / counted as f64);
    }

    let flat = |s: &[Tensor<f64>]| s.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>();
    let (gf, rf) = (flat(generated), flat(reference));
    let mmd_v = if opts.with_mmd && n >= 2 { Some(mmd(&gf, &rf)?) } else { None };
    let reg = regression_metrics(&gf.concat(), &rf.concat())?;
    Ok(EvalReport {
        n_samples: n,
        energy_error: energy,
        phase_error: phase,
        phase_skipped: skipped,
        long_rmse: long,
        long_fraction: opts.long_fraction,
        violation_rate: violation,
        violation_threshold: opts.threshold,
        phi_mean: phi,
        phi_total_mean: total,
        mmd: mmd_v,
        r2: reg.r2,
        rmse: reg.rmse,
        mae: reg.mae,
        runtime_secs,
    })
}
