//! Fixed-step ODE integration from noise to data and the empirical
//! Grönwall deviation bound.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::guidance::{alpha, GuidanceConfig};
use crate::model::Model;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub method: Method,
    pub steps: usize,
    pub seed: u64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps: 100,
            seed: 0,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("integrator needs at least one step".into()));
        }
        Ok(())
    }
}

/// States on the uniform flow-time grid `t_k = k / steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPath<S: Scalar> {
    pub t: Vec<f64>,
    pub states: Vec<Tensor<S>>,
}

impl<S: Scalar> FlowPath<S> {
    pub fn last(&self) -> &Tensor<S> {
        self.states.last().expect("path holds the initial state")
    }
}

fn axpy<S: Scalar>(x: &Tensor<S>, h: f64, k: &Tensor<S>) -> Result<Tensor<S>> {
    let h = S::lit(h);
    x.zip_map(k, "integrate", |a, b| a + h * b)
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `t = 1`.
pub fn integrate<S: Scalar>(
    mut field: impl FnMut(&Tensor<S>, f64) -> Result<Tensor<S>>,
    x0: &Tensor<S>,
    cfg: &IntegratorConfig,
) -> Result<FlowPath<S>> {
    cfg.validate()?;
    let n = cfg.steps;
    let h = 1.0 / n as f64;
    let mut x = x0.clone();
    let mut path = FlowPath {
        t: vec![0.0],
        states: vec![x.clone()],
    };
    for k in 0..n {
        let t = k as f64 * h;
        let next = match cfg.method {
            Method::Euler => axpy(&x, h, &field(&x, t)?)?,
            Method::Rk4 => {
                let k1 = field(&x, t)?;
                let k2 = field(&axpy(&x, h / 2.0, &k1)?, t + h / 2.0)?;
                let k3 = field(&axpy(&x, h / 2.0, &k2)?, t + h / 2.0)?;
                let k4 = field(&axpy(&x, h, &k3)?, t + h)?;
                let s = S::lit(h / 6.0);
                let two = S::lit(2.0);
                let xd = x.data();
                let (a, b, c, d) = (k1.data(), k2.data(), k3.data(), k4.data());
                Tensor::from_fn(x.shape(), |i| xd[i] + s * (a[i] + two * b[i] + two * c[i] + d[i]))
            }
        };
        if !next.all_finite() {
            return Err(Error::Numeric(format!("non-finite state at integration step {}", k + 1)));
        }
        x = next;
        path.t.push((k + 1) as f64 * h);
        path.states.push(x.clone());
    }
    Ok(path)
}

/// Standard-normal initial draw for `[B, D, T]`; `index` selects an
/// independent stream so batches of one run never share noise.
pub fn initial_noise<S: Scalar>(shape: &[usize], seed: u64, index: u64) -> Tensor<S> {
    let mut rng = crate::trainer::derived_rng(seed, 3, index);
    Tensor::from_fn(shape, |_| S::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Generates one normalized sample per condition row with the (guided) flow.
pub fn sample<S: Scalar>(model: &Model<S>, c: &Tensor<S>, g: &GuidanceConfig, cfg: &IntegratorConfig) -> Result<Tensor<S>> {
    let shape = [c.shape()[0], model.state_dim(), model.t_len];
    let x0 = initial_noise(&shape, cfg.seed, 0);
    sample_from(model, &x0, c, g, cfg)
}

pub fn sample_from<S: Scalar>(
    model: &Model<S>,
    x0: &Tensor<S>,
    c: &Tensor<S>,
    g: &GuidanceConfig,
    cfg: &IntegratorConfig,
) -> Result<Tensor<S>> {
    let path = integrate(|x, t| model.guided_velocity_eval(x, t, c, g), x0, cfg)?;
    Ok(path.states.into_iter().next_back().expect("path holds the initial state"))
}

fn row_norms<S: Scalar>(x: &Tensor<S>) -> Vec<f64> {
    let b = x.shape()[0];
    let row = x.len() / b.max(1);
    x.data()
        .chunks(row)
        .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

/// `max ||f(x) - f(x')|| / ||x - x'||` over all probe pairs; coincident pairs are skipped.
pub fn estimate_lipschitz<S: Scalar>(mut f: impl FnMut(&Tensor<S>) -> Result<Tensor<S>>, probes: &[Tensor<S>]) -> Result<f64> {
    if probes.len() < 2 {
        return Err(Error::invalid("Lipschitz estimate needs at least two probes"));
    }
    let vals = probes.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
    let mut best: Option<f64> = None;
    for i in 0..probes.len() {
        for j in i + 1..probes.len() {
            let dx = dist(&probes[i], &probes[j])?;
            if dx == 0.0 {
                continue;
            }
            let r = dist(&vals[i], &vals[j])? / dx;
            best = Some(best.map_or(r, |b| b.max(r)));
        }
    }
    best.ok_or_else(|| Error::invalid("every probe pair is degenerate"))
}

fn dist<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("lipschitz", a.shape(), b.shape()));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Uniform probes in the per-coordinate box of `reference`, inflated by 20 %.
pub fn box_probes<S: Scalar>(reference: &[Tensor<S>], n: usize, rng: &mut impl Rng) -> Result<Vec<Tensor<S>>> {
    let first = reference.first().ok_or_else(|| Error::invalid("empty probe reference"))?;
    let len = first.len();
    let mut lo = vec![f64::INFINITY; len];
    let mut hi = vec![f64::NEG_INFINITY; len];
    for r in reference {
        for (i, v) in r.data().iter().enumerate() {
            lo[i] = lo[i].min(v.as_f64());
            hi[i] = hi[i].max(v.as_f64());
        }
    }
    for i in 0..len {
        let pad = 0.1 * (hi[i] - lo[i]);
        lo[i] -= pad;
        hi[i] += pad;
    }
    Ok((0..n)
        .map(|_| Tensor::from_fn(first.shape(), |i| S::lit(lo[i] + (hi[i] - lo[i]) * rng.random::<f64>())))
        .collect())
}

/// `||d0|| e^{Lt} + eps / L (e^{Lt} - 1)`, with the `L -> 0` limit `||d0|| + eps t`.
pub fn gronwall_bound(d0: f64, eps: f64, l: f64, t: f64) -> f64 {
    if l == 0.0 {
        return d0 + eps * t;
    }
    let e = (l * t).exp();
    d0 * e + eps / l * (e - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub eps_fno: f64,
    /// Field mismatch bound entering the inequality.
    pub eps_field: f64,
    pub l_hat: f64,
    pub l_f_hat: f64,
    pub t: Vec<f64>,
    /// Worst case over the certified starts at each grid time.
    pub deviation: Vec<f64>,
    pub bound: Vec<f64>,
    /// Number of starts whose deviation stayed below its bound at every time.
    pub starts_holding: usize,
    pub starts: usize,
    pub holds: bool,
}

/// Integrates both fields from `x0` and `y0` and compares the per-row
/// deviation against the Grönwall bound at every grid time.
#[allow(clippy::too_many_arguments)]
pub fn certify<S: Scalar>(
    model_field: impl FnMut(&Tensor<S>, f64) -> Result<Tensor<S>>,
    ideal_field: impl FnMut(&Tensor<S>, f64) -> Result<Tensor<S>>,
    x0: &Tensor<S>,
    y0: &Tensor<S>,
    eps_fno: f64,
    eps_field: f64,
    l_hat: f64,
    l_f_hat: f64,
    cfg: &IntegratorConfig,
) -> Result<BoundCertificate> {
    if x0.shape() != y0.shape() {
        return Err(Error::shape("verify_bound", x0.shape(), y0.shape()));
    }
    let xs = integrate(model_field, x0, cfg)?;
    let ys = integrate(ideal_field, y0, cfg)?;
    let d0 = row_norms(&x0.sub(y0)?);
    let l = l_hat + l_f_hat;
    let mut deviation = Vec::with_capacity(xs.t.len());
    let mut bound = Vec::with_capacity(xs.t.len());
    let mut ok = vec![true; d0.len()];
    for (k, &t) in xs.t.iter().enumerate() {
        let dev = row_norms(&xs.states[k].sub(&ys.states[k])?);
        let mut worst_dev = 0.0f64;
        let mut worst_bound = f64::INFINITY;
        for (r, &dv) in dev.iter().enumerate() {
            let bd = gronwall_bound(d0[r], eps_field, l, t);
            // Rounding slack so an exactly tight bound is not reported as violated.
            if dv > bd * (1.0 + 1e-9) + 1e-12 {
                ok[r] = false;
            }
            worst_dev = worst_dev.max(dv);
            worst_bound = worst_bound.min(bd);
        }
        deviation.push(worst_dev);
        bound.push(worst_bound);
    }
    let starts_holding = ok.iter().filter(|&&o| o).count();
    Ok(BoundCertificate {
        eps_fno,
        eps_field,
        l_hat,
        l_f_hat,
        t: xs.t,
        deviation,
        bound,
        starts_holding,
        starts: ok.len(),
        holds: starts_holding == ok.len(),
    })
}

/// Certifies the guided sampler against the ideal field in which the
/// operator prediction is replaced by the oracle terminal state `oracle`.
///
/// The two fields differ only in the guidance target, so their mismatch is
/// bounded by `2 alpha_max ||u_FNO - oracle||`; `eps_fno` is the largest
/// sup-norm operator error seen on `probe_x0` starts and is scaled by the
/// square root of the state size to bound the Euclidean mismatch. `L_f` is
/// the Lipschitz constant of the oracle guidance term, `2 alpha_max`; `L` is
/// estimated for the velocity network on box probes around the probe paths.
#[allow(clippy::too_many_arguments)]
pub fn verify_bound<S: Scalar>(
    model: &Model<S>,
    g: &GuidanceConfig,
    oracle: &Tensor<S>,
    c: &Tensor<S>,
    x0: &Tensor<S>,
    y0: &Tensor<S>,
    probe_x0: &Tensor<S>,
    n_lipschitz_probes: usize,
    cfg: &IntegratorConfig,
    rng: &mut impl Rng,
) -> Result<BoundCertificate> {
    // Operator error along held-out sampling paths.
    let mut eps_fno = 0.0f64;
    let mut visited: Vec<(Tensor<S>, f64)> = Vec::new();
    let probe_path = integrate(
        |x, t| {
            let v = model.velocity_eval(x, t, c)?;
            let k = S::lit(1.0 - t);
            let xhat = x.zip_map(&v, "lookahead", |a, b| a + k * b)?;
            let fno = model.bank_eval(&xhat, c)?;
            eps_fno = eps_fno.max(fno.max_abs_diff(oracle)?.as_f64());
            let ga = S::lit(2.0 * alpha(t, g));
            let gv = Tensor::from_fn(x.shape(), |i| v.data()[i] - ga * (x.data()[i] - fno.data()[i]));
            visited.push((x.clone(), t));
            Ok(gv)
        },
        probe_x0,
        cfg,
    )?;
    drop(probe_path);

    let b = x0.shape()[0];
    let row = x0.len() / b;
    let eps_field = 2.0 * g.alpha_max * eps_fno * (row as f64).sqrt();
    let l_f_hat = 2.0 * g.alpha_max;

    // Velocity Lipschitz estimate, pairing probes that share a flow time.
    let mut l_hat = 0.0f64;
    let n_times = visited.len().min(8).max(1);
    let stride = (visited.len() / n_times).max(1);
    for (x, t) in visited.iter().step_by(stride) {
        let rows: Vec<Tensor<S>> = (0..x.shape()[0]).map(|r| x.narrow0(r, 1)).collect::<Result<_>>()?;
        let probes = box_probes(&rows, n_lipschitz_probes.max(2), rng)?;
        let c1 = c.narrow0(0, 1)?;
        let est = estimate_lipschitz(|p| model.velocity_eval(p, *t, &c1), &probes)?;
        l_hat = l_hat.max(est);
    }

    let model_field = |x: &Tensor<S>, t: f64| model.guided_velocity_eval(x, t, c, g);
    let ideal_field = |y: &Tensor<S>, t: f64| {
        let v = model.velocity_eval(y, t, c)?;
        let ga = S::lit(2.0 * alpha(t, g));
        Ok(Tensor::from_fn(y.shape(), |i| v.data()[i] - ga * (y.data()[i] - oracle.data()[i])))
    };
    certify(model_field, ideal_field, x0, y0, eps_fno, eps_field, l_hat, l_f_hat, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    fn cfg(method: Method, steps: usize) -> IntegratorConfig {
        IntegratorConfig { method, steps, seed: 0 }
    }

    #[test]
    fn constant_fields() {
        for m in [Method::Euler, Method::Rk4] {
            let x0 = scalar(0.25);
            let p = integrate(|x, _| Ok(Tensor::zeros(x.shape())), &x0, &cfg(m, 10)).unwrap();
            assert_eq!(p.last(), &x0);
            let p = integrate(|x, _| Ok(Tensor::full(x.shape(), 1.0)), &x0, &cfg(m, 8)).unwrap();
            assert_eq!(p.last().data()[0], 1.25);
            assert_eq!(p.t.len(), 9);
        }
    }

    #[test]
    fn rk4_exponential_decay() {
        let p = integrate(|x, _| Ok(x.scale(-1.0)), &scalar(1.0), &cfg(Method::Rk4, 100)).unwrap();
        assert!((p.last().data()[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_fourth_order_refinement() {
        let run = |n| {
            integrate(|x, t| Ok(x.map(|v| (t * v).cos() - v)), &scalar(0.3), &cfg(Method::Rk4, n))
                .unwrap()
                .last()
                .data()[0]
        };
        let (a, b, c) = (run(10), run(20), run(40));
        let (d1, d2) = ((a - b).abs(), (b - c).abs());
        assert!(d1 < 16.0 * d2 * 1.5 && d1 > 16.0 * d2 / 1.5, "{d1} {d2}");
    }

    #[test]
    fn nan_reports_step() {
        let err = integrate(
            |x, t| Ok(if t >= 0.3 { x.map(|_| f64::NAN) } else { x.clone() }),
            &scalar(1.0),
            &cfg(Method::Euler, 10),
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 4"), "{err}");
    }

    #[test]
    fn lipschitz_examples() {
        let probes: Vec<Tensor<f64>> = (0..20).map(|i| scalar(i as f64 * 0.37 - 3.0)).collect();
        let l = estimate_lipschitz(|x| Ok(x.scale(2.0)), &probes).unwrap();
        assert!((l - 2.0).abs() < 1e-10);
        assert_eq!(estimate_lipschitz(|x| Ok(Tensor::full(x.shape(), 3.0)), &probes).unwrap(), 0.0);
        let same = vec![scalar(1.0), scalar(1.0)];
        assert!(estimate_lipschitz(|x| Ok(x.clone()), &same).is_err());
        assert!(estimate_lipschitz(|x| Ok(x.clone()), &same[..1]).is_err());
    }

    #[test]
    fn lipschitz_of_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probes: Vec<Tensor<f64>> = (0..10_000).map(|_| scalar(rng.random_range(-10.0..10.0))).collect();
        let l = estimate_lipschitz(|x| Ok(x.map(|v| 1.0 / (1.0 + (-v).exp()))), &probes).unwrap();
        assert!((0.24..=0.25).contains(&l), "{l}");
    }

    #[test]
    fn certificate_trivial_and_linear_cases() {
        let c = cfg(Method::Rk4, 50);
        let x0 = Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, -1.0, 0.5, 0.0]).unwrap();
        let cert = certify(|x, _| Ok(x.scale(0.5)), |x, _| Ok(x.scale(0.5)), &x0, &x0, 0.0, 0.0, 0.5, 0.0, &c).unwrap();
        assert!(cert.holds);
        assert!(cert.deviation.iter().all(|&d| d == 0.0) && cert.bound.iter().all(|&b| b == 0.0));

        // Linear field with known L: deviation grows exactly like the bound.
        let y0 = x0.map(|v| v + 0.01);
        let l = 0.8;
        let cert = certify(|x, _| Ok(x.scale(l)), |x, _| Ok(x.scale(l)), &x0, &y0, 0.0, 0.0, l, 0.0, &c).unwrap();
        assert!(cert.holds);
        let d0 = (3.0f64).sqrt() * 0.01;
        for (k, &t) in cert.t.iter().enumerate() {
            let exact = d0 * (l * t).exp();
            assert!((cert.deviation[k] - exact).abs() < 1e-9 * exact.max(1.0));
            assert!((cert.bound[k] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lipschitz_limit() {
        assert_eq!(gronwall_bound(0.0, 2.0, 0.0, 0.5), 1.0);
        assert!((gronwall_bound(0.0, 2.0, 1e-9, 0.5) - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn bound_monotone(d0 in 0.0f64..2.0, e in 0.0f64..2.0, l in 0.0f64..5.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0, de in 0.0f64..1.0) {
            let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(gronwall_bound(d0, e, l, a) <= gronwall_bound(d0, e, l, b) + 1e-12);
            prop_assert!(gronwall_bound(d0, e, l, b) <= gronwall_bound(d0, e + de, l, b) + 1e-12);
        }

        #[test]
        fn euler_with_guidance_term_descends(seed in 0u64..200, h in 0.01f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x0 = Tensor::from_f64(&[6], &(0..6).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>()).unwrap();
            let tgt = Tensor::from_f64(&[6], &target).unwrap();
            let g = GuidanceConfig { alpha_max: 0.9, ..Default::default() };
            let steps = (1.0 / h).ceil() as usize;
            let path = integrate(
                |x, t| guidance_only(x, &tgt, t, &g),
                &x0,
                &cfg(Method::Euler, steps),
            ).unwrap();
            let d: Vec<f64> = path.states.iter().map(|s| s.sub(&tgt).unwrap().norm()).collect();
            prop_assert!(d.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    fn guidance_only(x: &Tensor<f64>, tgt: &Tensor<f64>, t: f64, g: &GuidanceConfig) -> Result<Tensor<f64>> {
        let gt = crate::guidance::guidance_term(x, tgt, t, g)?;
        Ok(gt.scale(-1.0))
    }
}
