//! The full generator: condition encoder, velocity network and operator bank
//! over one parameter store, plus the feature normalization they were
//! trained with.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::{ConditionEncoder, UNetConfig, VelocityField};
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fno::{BankConfig, OperatorBank};
use crate::guidance::{self, GuidanceConfig};
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_h: usize,
    pub unet_width: usize,
    pub kernel: usize,
    pub time_dim: usize,
    pub fno_width: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            unet_width: 32,
            kernel: 5,
            time_dim: 64,
            fno_width: 32,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.d_h, self.unet_width, self.time_dim, self.fno_width, self.head_hidden];
        if sizes.contains(&0) || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("model sizes must be positive with an odd kernel, got {self:?}")));
        }
        Ok(())
    }
}

/// Per-channel affine standardization of states and conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub cond_mean: Vec<f64>,
    pub cond_std: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut s = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for r in rows {
        n += 1;
        for (j, v) in r.iter().enumerate() {
            s[j] += v;
            s2[j] += v * v;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let std = s2
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            // Constant channels map to zero rather than blowing up.
            if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(state_dim: usize, cond_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            cond_mean: vec![0.0; cond_dim],
            cond_std: vec![1.0; cond_dim],
        }
    }

    /// Statistics of `[T, D]` trajectories and their condition rows.
    pub fn fit(trajs: &[Tensor<f64>], conds: &[Vec<f64>]) -> Result<Self> {
        let (Some(t0), Some(c0)) = (trajs.first(), conds.first()) else {
            return Err(Error::invalid("cannot fit normalization on an empty set"));
        };
        let d = t0.shape()[1];
        let dc = c0.len();
        let (state_mean, state_std) = moments(trajs.iter().flat_map(|t| t.data().chunks(d).map(|r| r.to_vec()).collect::<Vec<_>>()), d);
        let (cond_mean, cond_std) = moments(conds.iter().cloned(), dc);
        Ok(Self {
            state_mean,
            state_std,
            cond_mean,
            cond_std,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_mean.len()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_mean.len()
    }

    /// `[T, D]` physical trajectories -> normalized `[B, D, T]` batch.
    pub fn encode_states<S: Scalar>(&self, trajs: &[&Tensor<f64>]) -> Result<Tensor<S>> {
        let d = self.state_dim();
        let t_len = trajs.first().map(|t| t.shape()[0]).unwrap_or(0);
        let mut out = vec![S::zero(); trajs.len() * d * t_len];
        for (b, tr) in trajs.iter().enumerate() {
            if tr.shape() != [t_len, d] {
                return Err(Error::shape("encode_states", tr.shape(), &[t_len, d]));
            }
            for (i, row) in tr.data().chunks(d).enumerate() {
                for c in 0..d {
                    out[(b * d + c) * t_len + i] = S::lit((row[c] - self.state_mean[c]) / self.state_std[c]);
                }
            }
        }
        Tensor::new(vec![trajs.len(), d, t_len], out)
    }

    /// Inverse of [`Self::encode_states`].
    pub fn decode_states<S: Scalar>(&self, x: &Tensor<S>) -> Result<Vec<Tensor<f64>>> {
        let d = self.state_dim();
        let s = x.shape();
        if s.len() != 3 || s[1] != d {
            return Err(Error::shape("decode_states", s, &[0, d, 0]));
        }
        let (b, t_len) = (s[0], s[2]);
        let xd = x.data();
        (0..b)
            .map(|bi| {
                let mut v = Vec::with_capacity(t_len * d);
                for i in 0..t_len {
                    for c in 0..d {
                        v.push(xd[(bi * d + c) * t_len + i].as_f64() * self.state_std[c] + self.state_mean[c]);
                    }
                }
                Tensor::from_f64(&[t_len, d], &v)
            })
            .collect()
    }

    pub fn encode_conds<S: Scalar>(&self, conds: &[&[f64]]) -> Result<Tensor<S>> {
        let dc = self.cond_dim();
        let mut out = Vec::with_capacity(conds.len() * dc);
        for c in conds {
            if c.len() != dc {
                return Err(Error::shape("encode_conds", &[c.len()], &[dc]));
            }
            out.extend(c.iter().enumerate().map(|(j, v)| S::lit((v - self.cond_mean[j]) / self.cond_std[j])));
        }
        Tensor::new(vec![conds.len(), dc], out)
    }

    /// Maps a normalized `[B, D, T]` node back to physical units on the tape.
    pub fn denormalize<'t, S: Scalar>(&self, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let d = self.state_dim();
        let tape = x.tape();
        let std = tape.constant(Tensor::from_f64(&[1, d, 1], &self.state_std)?);
        let mean = tape.constant(Tensor::from_f64(&[1, d, 1], &self.state_mean)?);
        x.mul(&std)?.add(&mean)
    }
}

/// Generator parameters and architecture.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub t_len: usize,
    pub store: ParamStore<S>,
    pub encoder: ConditionEncoder,
    pub unet: VelocityField,
    pub bank: OperatorBank,
    pub norm: Normalizer,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig, t_len: usize, norm: Normalizer, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dc) = (norm.state_dim(), norm.cond_dim());
        let mut store = ParamStore::new();
        let encoder = ConditionEncoder::new(&mut store, dc, cfg.d_h, rng);
        let unet = VelocityField::new(
            &mut store,
            UNetConfig {
                state_dim: d,
                width: cfg.unet_width,
                kernel: cfg.kernel,
                time_dim: cfg.time_dim,
                d_h: cfg.d_h,
            },
            rng,
        );
        let bank = OperatorBank::new(
            &mut store,
            BankConfig {
                t_len,
                state_dim: d,
                cond_dim: dc,
                width: cfg.fno_width,
                head_input: cfg.d_h,
                head_hidden: cfg.head_hidden,
            },
            rng,
        )?;
        Ok(Self {
            cfg,
            t_len,
            store,
            encoder,
            unet,
            bank,
            norm,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.norm.state_dim()
    }

    /// Velocity and condition embedding on an existing tape.
    pub fn velocity<'t>(&self, p: &Bound<'t, S>, x: &Var<'t, S>, t: &[S], c: &Var<'t, S>) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let h = self.encoder.encode(p, c)?;
        Ok((self.unet.forward(p, x, t, &h)?, h))
    }

    /// Unguided velocity at a common flow time for every row.
    pub fn velocity_eval(&self, x: &Tensor<S>, t: f64, c: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let ts = vec![S::lit(t); x.shape()[0]];
        let (v, _) = self.velocity(&p, &tape.constant(x.clone()), &ts, &tape.constant(c.clone()))?;
        Ok(v.value())
    }

    /// Integrated operator prediction `u_FNO(u, c)`.
    pub fn bank_eval(&self, u: &Tensor<S>, c: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, false);
        let cv = tape.constant(c.clone());
        let h = self.encoder.encode(&p, &cv)?;
        Ok(self.bank.forward(&p, &tape.constant(u.clone()), &cv, &h)?.mixed.value())
    }

    /// Guided velocity `v - 2 alpha(t) (x - u_FNO(x_hat))`, where
    /// `x_hat = x + (1 - t) v` is the flow's endpoint estimate.
    pub fn guided_velocity_eval(&self, x: &Tensor<S>, t: f64, c: &Tensor<S>, g: &GuidanceConfig) -> Result<Tensor<S>> {
        let v = self.velocity_eval(x, t, c)?;
        if !g.is_active() {
            return Ok(v);
        }
        let k = S::lit(1.0 - t);
        let xhat = x.zip_map(&v, "lookahead", |a, b| a + k * b)?;
        let x_fno = self.bank_eval(&xhat, c)?;
        let gterm = guidance::guidance_term(x, &x_fno, t, g)?;
        guidance::guided_velocity(&v, &gterm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d_h: 8,
            unet_width: 4,
            kernel: 3,
            time_dim: 8,
            fno_width: 4,
            head_hidden: 4,
        }
    }

    #[test]
    fn normalization_roundtrip() {
        let a = Tensor::from_f64(&[3, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0]).unwrap();
        let b = Tensor::from_f64(&[3, 2], &[0.0, 5.0, 1.0, 0.0, 4.0, 15.0]).unwrap();
        let norm = Normalizer::fit(&[a.clone(), b.clone()], &[vec![0.1], vec![0.3]]).unwrap();
        let x = norm.encode_states::<f64>(&[&a, &b]).unwrap();
        assert_eq!(x.shape(), &[2, 2, 3]);
        let back = norm.decode_states(&x).unwrap();
        assert!(back[0].max_abs_diff(&a).unwrap() < 1e-12);
        assert!(back[1].max_abs_diff(&b).unwrap() < 1e-12);
        let mean: f64 = x.data().iter().sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 1e-12);
        let c = norm.encode_conds::<f64>(&[&[0.1], &[0.3]]).unwrap();
        assert!((c.data()[0] + 1.0).abs() < 1e-12 && (c.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_off_equals_plain_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::<f64>::new(small(), 16, Normalizer::identity(2, 3), &mut rng).unwrap();
        let x = crate::testutil::rand_tensor::<f64>(&mut rng, &[2, 2, 16]);
        let c = crate::testutil::rand_tensor::<f64>(&mut rng, &[2, 3]);
        let v = model.velocity_eval(&x, 0.4, &c).unwrap();
        let g = model.guided_velocity_eval(&x, 0.4, &c, &GuidanceConfig::disabled()).unwrap();
        assert_eq!(v, g);
        let on = model.guided_velocity_eval(&x, 0.9, &c, &GuidanceConfig::default()).unwrap();
        assert!(on.max_abs_diff(&v).unwrap() > 0.0);
    }
}
