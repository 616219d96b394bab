//! Conditional flow matching: condition encoder, velocity network, linear
//! probability path and the regression loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, Linear, Mlp2, ParamStore};
use crate::scalar::Scalar;

/// MLP from the raw condition vector to the embedding `h_c`.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    pub mlp: Mlp2,
    pub cond_dim: usize,
    pub d_h: usize,
}

impl ConditionEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cond_dim: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp2::new(store, "cond", cond_dim, d_h, d_h, rng),
            cond_dim,
            d_h,
        }
    }

    /// `c: [B, dc]` -> `h_c: [B, d_h]`.
    pub fn encode<'t, S: Scalar>(&self, p: &Bound<'t, S>, c: &Var<'t, S>) -> Result<Var<'t, S>> {
        if !c.value().all_finite() {
            return Err(Error::Numeric("condition contains a non-finite value".into()));
        }
        let s = c.shape();
        if s.len() != 2 || s[1] != self.cond_dim {
            return Err(Error::shape("encode_condition", &s, &[0, self.cond_dim]));
        }
        self.mlp.forward(p, c)
    }
}

/// Sinusoidal embedding of flow times `t` into `dim` features.
pub fn time_embedding<S: Scalar>(t: &[S], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let ti = ti.as_f64();
        for part in 0..2 {
            for i in 0..half {
                let f = (-(1000.0_f64).ln() * i as f64 / half as f64).exp();
                let a = 100.0 * ti * f;
                out.push(S::lit(if part == 0 { a.sin() } else { a.cos() }));
            }
        }
        for _ in 2 * half..dim {
            out.push(S::zero());
        }
    }
    Tensor::from_parts(vec![t.len(), dim], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub state_dim: usize,
    pub width: usize,
    pub kernel: usize,
    pub time_dim: usize,
    pub d_h: usize,
}

/// Two convolutions with feature-wise affine modulation by the embedding.
#[derive(Debug, Clone)]
struct Block {
    c1: Conv1d,
    c2: Conv1d,
    film: Linear,
    c_out: usize,
}

impl Block {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &UNetConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            c1: Conv1d::new(store, &format!("{name}.c1"), c_in, c_out, cfg.kernel, true, rng),
            c2: Conv1d::new(store, &format!("{name}.c2"), c_out, c_out, cfg.kernel, true, rng),
            film: Linear::new(store, &format!("{name}.film"), cfg.d_h, 2 * c_out, true, rng),
            c_out,
        }
    }

    fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>, emb: &Var<'t, S>) -> Result<Var<'t, S>> {
        let b = x.shape()[0];
        let y = self.c1.forward(p, x)?.gelu()?;
        let f = self.film.forward(p, emb)?;
        let scale = f.slice(1, 0, self.c_out)?.reshape(&[b, self.c_out, 1])?;
        let shift = f.slice(1, self.c_out, self.c_out)?.reshape(&[b, self.c_out, 1])?;
        let y = y.mul(&scale.offset(1.0)?)?.add(&shift)?;
        self.c2.forward(p, &y)?.gelu()
    }
}

/// Three-level 1-D encoder/decoder with skip connections.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub cfg: UNetConfig,
    time_proj: Linear,
    input: Conv1d,
    enc1: Block,
    enc2: Block,
    mid: Block,
    dec2: Block,
    dec1: Block,
    output: Conv1d,
}

impl VelocityField {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: UNetConfig, rng: &mut impl Rng) -> Self {
        let w = cfg.width;
        Self {
            time_proj: Linear::new(store, "unet.time", cfg.time_dim, cfg.d_h, true, rng),
            input: Conv1d::new(store, "unet.in", cfg.state_dim, w, cfg.kernel, true, rng),
            enc1: Block::new(store, "unet.enc1", w, w, &cfg, rng),
            enc2: Block::new(store, "unet.enc2", w, w, &cfg, rng),
            mid: Block::new(store, "unet.mid", w, w, &cfg, rng),
            dec2: Block::new(store, "unet.dec2", 2 * w, w, &cfg, rng),
            dec1: Block::new(store, "unet.dec1", 2 * w, w, &cfg, rng),
            output: Conv1d::new(store, "unet.out", w, cfg.state_dim, cfg.kernel, true, rng),
            cfg,
        }
    }

    /// `v(x, t, h_c)` for `x: [B, D, T]`, one flow time per batch row.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        x: &Var<'t, S>,
        t: &[S],
        h_c: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.cfg.state_dim || shape[2] < 4 {
            return Err(Error::shape("velocity", &shape, &[0, self.cfg.state_dim, 0]));
        }
        if t.len() != shape[0] {
            return Err(Error::shape("velocity", &shape, &[t.len()]));
        }
        let temb = p.constant(time_embedding(t, self.cfg.time_dim));
        let emb = h_c.add(&self.time_proj.forward(p, &temb)?)?;
        let z = self.input.forward(p, x)?;
        let a1 = self.enc1.forward(p, &z, &emb)?;
        let a2 = self.enc2.forward(p, &a1.avg_pool2()?, &emb)?;
        let m = self.mid.forward(p, &a2.avg_pool2()?, &emb)?;
        let u2 = m.upsample(a2.shape()[2])?;
        let b2 = self.dec2.forward(p, &Var::concat(&[u2, a2], 1)?, &emb)?;
        let u1 = b2.upsample(a1.shape()[2])?;
        let b1 = self.dec1.forward(p, &Var::concat(&[u1, a1], 1)?, &emb)?;
        self.output.forward(p, &b1)
    }
}

/// Draws `x_0 ~ N(0, I)` and forms the linear path at per-row times `t`.
pub struct PathSample<S> {
    pub x0: Tensor<S>,
    pub xt: Tensor<S>,
    pub ut: Tensor<S>,
}

pub fn sample_path<S: Scalar>(x1: &Tensor<S>, t: &[S], rng: &mut impl Rng) -> Result<PathSample<S>> {
    let x0 = Tensor::from_fn(x1.shape(), |_| S::lit(rng.sample::<f64, _>(StandardNormal)));
    path_at(x1, &x0, t)
}

/// `x_t = (1 - t) x_0 + t x_1`, `u_t = x_1 - x_0`, rows of `x1` paired with `t`.
pub fn path_at<S: Scalar>(x1: &Tensor<S>, x0: &Tensor<S>, t: &[S]) -> Result<PathSample<S>> {
    if x1.shape() != x0.shape() {
        return Err(Error::shape("sample_path", x1.shape(), x0.shape()));
    }
    if t.len() != x1.shape()[0] {
        return Err(Error::shape("sample_path", x1.shape(), &[t.len()]));
    }
    if let Some(bad) = t.iter().find(|&&ti| !(ti >= S::zero() && ti <= S::one())) {
        return Err(Error::invalid(format!("flow time {bad} outside [0, 1]")));
    }
    let row = x1.len() / t.len();
    let xt = Tensor::from_fn(x1.shape(), |i| {
        let ti = t[i / row];
        (S::one() - ti) * x0.data()[i] + ti * x1.data()[i]
    });
    let ut = x1.sub(x0)?;
    Ok(PathSample {
        x0: x0.clone(),
        xt,
        ut,
    })
}

/// Mean squared error between predicted and target velocities.
pub fn cfm_loss<'t, S: Scalar>(v_pred: &Var<'t, S>, u_t: &Var<'t, S>) -> Result<Var<'t, S>> {
    v_pred.mse(u_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tape;
    use crate::testutil::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ucfg() -> UNetConfig {
        UNetConfig {
            state_dim: 2,
            width: 4,
            kernel: 5,
            time_dim: 8,
            d_h: 6,
        }
    }

    #[test]
    fn encoder_zero_final_layer_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&mut store, 3, 6, &mut rng);
        store.set(enc.mlp.l2.w, Tensor::zeros(&[6, 6])).unwrap();
        let bias = store.get(enc.mlp.l2.b.unwrap()).clone();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let h = enc.encode(&p, &tape.constant(rand_tensor(&mut rng, &[4, 3]))).unwrap().value();
        for row in h.data().chunks(6) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn encoder_is_deterministic_smooth_and_rejects_nan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&mut store, 3, 64, &mut rng);
        let c = rand_tensor::<f64>(&mut rng, &[1, 3]);
        let run = |c: &Tensor<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            enc.encode(&p, &tape.constant(c.clone())).unwrap().value()
        };
        assert_eq!(run(&c), run(&c));
        let mut d = c.to_vec();
        d[1] += 1e-6;
        let moved = run(&Tensor::new(vec![1, 3], d).unwrap());
        assert!(moved.sub(&run(&c)).unwrap().norm() < 1e-3);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let bad = tape.constant(Tensor::new(vec![1, 3], vec![0.0, f64::NAN, 0.0]).unwrap());
        assert!(enc.encode(&p, &bad).is_err());
    }

    #[test]
    fn path_endpoints_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x1 = rand_tensor::<f64>(&mut rng, &[2, 2, 5]);
        let p0 = sample_path(&x1, &[0.0, 0.0], &mut rng).unwrap();
        assert_eq!(p0.xt, p0.x0);
        assert_eq!(p0.ut, x1.sub(&p0.x0).unwrap());
        let p1 = sample_path(&x1, &[1.0, 1.0], &mut rng).unwrap();
        assert_eq!(p1.xt, x1);
        assert!(sample_path(&x1, &[0.5, 1.5], &mut rng).is_err());
        assert!(sample_path(&x1, &[-0.1, 0.5], &mut rng).is_err());
    }

    #[test]
    fn path_mean_matches_t_times_x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x1 = Tensor::<f64>::from_f64(&[1, 1, 3], &[1.0, -2.0, 0.5]).unwrap();
        let t = 0.3;
        let n = 10_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let s = sample_path(&x1, &[t], &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(s.xt.data()) {
                *a += v;
            }
        }
        // std of x_t is (1 - t); 3 sigma of the sample mean
        let tol = 3.0 * (1.0 - t) / (n as f64).sqrt();
        for (a, x) in acc.iter().zip(x1.data()) {
            assert!((a / n as f64 - t * x).abs() < tol);
        }
    }

    #[test]
    fn loss_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let u = tape.constant(rand_tensor::<f64>(&mut rng, &[2, 2, 6]));
        assert_eq!(cfm_loss(&u, &u).unwrap().item(), 0.0);
        let v = u.offset(1.0).unwrap();
        assert!((cfm_loss(&v, &u).unwrap().item() - 1.0).abs() < 1e-12);
        let a = rand_tensor::<f64>(&mut rng, &[3, 4]);
        let b = rand_tensor::<f64>(&mut rng, &[3, 4]);
        let expect: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 12.0;
        let got = cfm_loss(&tape.constant(a), &tape.constant(b)).unwrap().item();
        assert!((got - expect).abs() < 1e-14);
        let w = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(cfm_loss(&w, &u).is_err());
    }

    #[test]
    fn velocity_shape_and_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let enc = ConditionEncoder::new(&mut store, 3, 6, &mut rng);
        let net = VelocityField::new(&mut store, ucfg(), &mut rng);
        let x = rand_tensor::<f64>(&mut rng, &[2, 2, 10]);
        let c = rand_tensor::<f64>(&mut rng, &[2, 3]);
        let target = rand_tensor::<f64>(&mut rng, &[2, 2, 10]);
        let t = [0.2, 0.7];
        let loss_at = |store: &ParamStore<f64>| {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let h = enc.encode(&p, &tape.constant(c.clone())).unwrap();
            let v = net.forward(&p, &tape.constant(x.clone()), &t, &h).unwrap();
            assert_eq!(v.shape(), vec![2, 2, 10]);
            cfm_loss(&v, &tape.constant(target.clone())).unwrap().item()
        };
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let h = enc.encode(&p, &tape.constant(c.clone())).unwrap();
        let v = net.forward(&p, &tape.constant(x.clone()), &t, &h).unwrap();
        let loss = cfm_loss(&v, &tape.constant(target.clone())).unwrap();
        let grads = tape.backward(loss).unwrap();
        // spot-check a spread of parameter entries against central differences
        let h_fd = 1e-5;
        for (k, var) in p.vars().iter().enumerate().step_by(3) {
            let g = grads.wrt(*var);
            let j = (k * 7) % g.len();
            let mut plus = store.clone();
            let mut minus = store.clone();
            let id = crate::nn::ParamId(k);
            let mut d = store.get(id).to_vec();
            d[j] += h_fd;
            plus.set(id, Tensor::new(store.get(id).shape().to_vec(), d.clone()).unwrap()).unwrap();
            d[j] -= 2.0 * h_fd;
            minus.set(id, Tensor::new(store.get(id).shape().to_vec(), d).unwrap()).unwrap();
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h_fd);
            let an = g.data()[j];
            assert!((an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()).max(1e-3), "param {k}: {an} vs {fd}");
        }
    }
}
