//! Joint optimization of the velocity network and the operator bank.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::sample_path;
use crate::constraints::{total_loss_rows, ConstraintSchedule, DomainPack, LossComponents};
use crate::datasets::Dataset;
use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::model::{Model, ModelConfig, Normalizer};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub seed: u64,
    pub schedule: ConstraintSchedule,
    pub guidance: GuidanceConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            schedule: ConstraintSchedule::default(),
            guidance: GuidanceConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let rates_ok = a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0;
        if !rates_ok || !(self.clip_norm > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "training needs positive epochs, batch size, clip norm and learning rate, betas in [0, 1); got {self:?}"
            )));
        }
        self.schedule.validate()?;
        self.guidance.validate()?;
        self.model.validate()
    }

    /// Whether the operator bank takes part in the objective at all.
    pub fn uses_bank(&self) -> bool {
        self.schedule.lambda_base.iter().any(|&l| l > 0.0) || self.schedule.beta_consist > 0.0 || self.guidance.is_active()
    }
}

/// First and second moment estimates, one pair per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Tensor<S>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step<S: Scalar>(params: &mut [Tensor<S>], grads: &[Tensor<S>], state: &mut AdamState<S>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1s, b2s) = (S::lit(b1), S::lit(b2));
    let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
    let (c1s, c2s) = (S::lit(c1), S::lit(c2));
    for i in 0..params.len() {
        let g = grads[i].data();
        let m = state.m[i].data().iter().zip(g).map(|(&m, &g)| b1s * m + (S::one() - b1s) * g);
        let m: Vec<S> = m.collect();
        let v: Vec<S> = state.v[i].data().iter().zip(g).map(|(&v, &g)| b2s * v + (S::one() - b2s) * g * g).collect();
        let p: Vec<S> = params[i]
            .data()
            .iter()
            .zip(m.iter().zip(&v))
            .map(|(&p, (&m, &v))| {
                let mh = m / c1s;
                let vh = v / c2s;
                p - lr * mh / (vh.sqrt() + eps)
            })
            .collect();
        let shape = params[i].shape().to_vec();
        params[i] = Tensor::new(shape.clone(), p)?;
        state.m[i] = Tensor::new(shape.clone(), m)?;
        state.v[i] = Tensor::new(shape, v)?;
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

/// Epoch means of every loss component plus wall time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub total: f64,
    pub cfm: f64,
    pub levels: [f64; 4],
    pub guidance: f64,
    pub consist: f64,
    pub wall_secs: f64,
}

impl TraceRow {
    pub const HEADER: &'static str = "epoch,total,cfm,l1,l2,l3,l4,guidance,consist,wall_secs";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:.3}",
            self.epoch,
            self.total,
            self.cfm,
            self.levels[0],
            self.levels[1],
            self.levels[2],
            self.levels[3],
            self.guidance,
            self.consist,
            self.wall_secs
        )
    }

    /// Same losses, regardless of timing.
    pub fn same_losses(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.total.to_bits() == other.total.to_bits()
            && self.cfm.to_bits() == other.cfm.to_bits()
            && self.levels.iter().zip(other.levels).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.guidance.to_bits() == other.guidance.to_bits()
            && self.consist.to_bits() == other.consist.to_bits()
    }
}

/// Trace as CSV. Without timing the text depends only on the run's inputs.
pub fn trace_csv(rows: &[TraceRow], with_timing: bool) -> String {
    let strip = |line: &str| if with_timing { line.to_string() } else { line[..line.rfind(',').unwrap_or(line.len())].to_string() };
    let mut s = strip(TraceRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&strip(&r.to_csv()));
        s.push('\n');
    }
    s
}

/// Result of one objective evaluation on a minibatch.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub total: f64,
    pub t: Vec<f64>,
    pub rows: Vec<LossComponents>,
}

/// Per-row mean of `(a - b)^2`, `[B]`.
fn row_mse<'t, S: Scalar>(a: &Var<'t, S>, b: &Var<'t, S>) -> Result<Var<'t, S>> {
    let s = a.shape();
    let n: usize = s[1..].iter().product();
    a.sub(b)?.square()?.reshape(&[s[0], n])?.sum_axis(1)?.scale(1.0 / n as f64)
}

fn row_values<S: Scalar>(v: &Var<'_, S>) -> Vec<f64> {
    v.value().data().iter().map(|x| x.as_f64()).collect()
}

/// Objective value, optional gradients and the bank input that was used.
#[derive(Debug, Clone)]
pub struct PinnedObjective<S: Scalar> {
    pub report: StepReport,
    pub grads: Option<Vec<Tensor<S>>>,
    pub bank_input: Option<Tensor<S>>,
}

/// Trainable model, optimizer and the run's bookkeeping.
#[derive(Debug, Clone)]
pub struct Trainer<S: Scalar> {
    pub model: Model<S>,
    pub opt: AdamState<S>,
    pub cfg: TrainConfig,
    pub pack: DomainPack,
    pub dataset_hash: String,
    pub epoch: usize,
    pub trace: Vec<TraceRow>,
}

/// Independent RNG stream for `(root seed, purpose, index)`.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    r
}

const STREAM_INIT: u64 = 1;
const STREAM_EPOCH: u64 = 2;

impl<S: Scalar> Trainer<S> {
    /// Fresh model with normalization fitted on `train`.
    pub fn new(train: &Dataset, pack: DomainPack, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if train.state_dim() != pack.state_dim() || train.cond_dim() != pack.cond_dim() {
            return Err(Error::Config(format!(
                "dataset has {} state / {} condition columns, pack expects {} / {}",
                train.state_dim(),
                train.cond_dim(),
                pack.state_dim(),
                pack.cond_dim()
            )));
        }
        let norm = Normalizer::fit(&train.trajectories, &train.conditions)?;
        let mut rng = derived_rng(cfg.seed, STREAM_INIT, 0);
        let model = Model::new(cfg.model.clone(), train.t_len(), norm, &mut rng)?;
        let opt = AdamState::new(model.store.values());
        Ok(Self {
            model,
            opt,
            cfg,
            pack,
            dataset_hash: train.fingerprint()?,
            epoch: 0,
            trace: Vec::new(),
        })
    }

    /// Evaluates the objective on one minibatch without updating anything.
    pub fn objective(&self, x1: &Tensor<S>, c: &Tensor<S>, conds: &[Vec<f64>], rng: &mut impl Rng) -> Result<StepReport> {
        let tape = Tape::new();
        Ok(self.objective_on(&tape, x1, c, conds, rng, false, None)?.report)
    }

    /// Objective and its gradient with respect to every parameter array, in store order.
    pub fn objective_grad(
        &self,
        x1: &Tensor<S>,
        c: &Tensor<S>,
        conds: &[Vec<f64>],
        rng: &mut impl Rng,
    ) -> Result<(StepReport, Vec<Tensor<S>>)> {
        let tape = Tape::new();
        let out = self.objective_on(&tape, x1, c, conds, rng, true, None)?;
        Ok((out.report, out.grads.expect("gradients requested")))
    }

    /// Objective with the bank input pinned to `bank_input` instead of the
    /// detached endpoint estimate (`None` keeps the estimate). With the
    /// input pinned the objective is a plain function of the parameters
    /// whose exact gradient is the training gradient.
    pub fn objective_pinned(
        &self,
        x1: &Tensor<S>,
        c: &Tensor<S>,
        conds: &[Vec<f64>],
        rng: &mut impl Rng,
        bank_input: Option<&Tensor<S>>,
        grad: bool,
    ) -> Result<PinnedObjective<S>> {
        let tape = Tape::new();
        self.objective_on(&tape, x1, c, conds, rng, grad, bank_input)
    }

    fn objective_on<'t>(
        &self,
        tape: &'t Tape<S>,
        x1: &Tensor<S>,
        c: &Tensor<S>,
        conds: &[Vec<f64>],
        rng: &mut impl Rng,
        grad: bool,
        pin: Option<&Tensor<S>>,
    ) -> Result<PinnedObjective<S>> {
        let b = x1.shape()[0];
        let sched = &self.cfg.schedule;
        let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
        let ts: Vec<S> = t.iter().map(|&v| S::lit(v)).collect();
        let path = sample_path(x1, &ts, rng)?;

        let p = self.model.store.bind(tape, true);
        let cv = tape.constant(c.clone());
        let x1v = tape.constant(x1.clone());
        let xt = tape.constant(path.xt.clone());
        let (v, h) = self.model.velocity(&p, &xt, &ts, &cv)?;
        let cfm = row_mse(&v, &tape.constant(path.ut))?;

        let mut rows = vec![LossComponents::default(); b];
        for (r, val) in rows.iter_mut().zip(row_values(&cfm)) {
            r.cfm = val;
        }
        let mut total = cfm.sum()?;
        let mut bank_input = None;

        if self.cfg.uses_bank() {
            // Endpoint estimate of the flow; the bank sees it detached.
            let remain = tape.constant(Tensor::from_fn(&[b, 1, 1], |i| S::one() - ts[i]));
            let xhat = xt.add(&v.mul(&remain)?)?;
            let xhat_in = tape.constant(pin.cloned().unwrap_or_else(|| xhat.value()));
            bank_input = Some(xhat_in.value());
            let bank = self.model.bank.forward(&p, &xhat_in, &cv, &h)?;

            if sched.lambda_base.iter().any(|&l| l > 0.0) {
                let x1_phys = self.model.norm.denormalize(&x1v)?;
                let targets = self.pack.signals(&x1_phys, conds)?;
                for (i, o) in bank.outs.iter().enumerate() {
                    if sched.lambda_base[i] == 0.0 {
                        continue;
                    }
                    let sig = self.pack.signals(&self.model.norm.denormalize(o)?, conds)?;
                    let li = row_mse(o, &x1v)?.add(&row_mse(&sig[i], &targets[i])?)?;
                    let lam: Vec<f64> = t.iter().map(|&ti| sched.lambda(i + 1, ti).expect("level in range")).collect();
                    for (r, val) in rows.iter_mut().zip(row_values(&li)) {
                        r.levels[i] = val;
                    }
                    let w = tape.constant(Tensor::from_f64(&[b], &lam)?);
                    total = total.add(&li.mul(&w)?.sum()?)?;
                }
            }
            if self.cfg.guidance.is_active() {
                let g = row_mse(&bank.mixed, &x1v)?;
                for (r, val) in rows.iter_mut().zip(row_values(&g)) {
                    r.guidance = val;
                }
                total = total.add(&g.sum()?)?;
            }
            if sched.beta_consist > 0.0 {
                let cons = row_mse(&bank.mixed, &xhat)?;
                for (r, val) in rows.iter_mut().zip(row_values(&cons)) {
                    r.consist = val;
                }
                total = total.add(&cons.sum()?.scale(sched.beta_consist)?)?;
            }
        }
        let loss = total.scale(1.0 / b as f64)?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value}")));
        }
        let grads = if grad {
            let g = tape.backward(loss)?;
            Some(p.vars().iter().map(|v| g.wrt(*v)).collect())
        } else {
            None
        };
        Ok(PinnedObjective {
            report: StepReport { total: value, t, rows },
            grads,
            bank_input,
        })
    }

    /// One Adam update on a minibatch.
    pub fn step(&mut self, x1: &Tensor<S>, c: &Tensor<S>, conds: &[Vec<f64>], rng: &mut impl Rng) -> Result<StepReport> {
        let tape = Tape::new();
        let out = self.objective_on(&tape, x1, c, conds, rng, true, None)?;
        let (report, mut grads) = (out.report, out.grads.expect("gradients requested"));
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            let name = self.model.store.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default();
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
        clip_grad_norm(&mut grads, self.cfg.clip_norm);
        let mut params = self.model.store.values().to_vec();
        adam_step(&mut params, &grads, &mut self.opt, &self.cfg.adam)?;
        self.model.store.replace_values(params)?;
        Ok(report)
    }

    /// Runs one epoch over `train`; the shuffle and path noise depend only on
    /// the root seed and the epoch index.
    pub fn run_epoch(&mut self, train: &Dataset) -> Result<TraceRow> {
        let start = Instant::now();
        let mut rng = derived_rng(self.cfg.seed, STREAM_EPOCH, self.epoch as u64);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let bs = self.cfg.batch_size.min(train.len());
        let mut acc = TraceRow {
            epoch: self.epoch + 1,
            total: 0.0,
            cfm: 0.0,
            levels: [0.0; 4],
            guidance: 0.0,
            consist: 0.0,
            wall_secs: 0.0,
        };
        let mut n_batches = 0usize;
        for (bi, chunk) in idx.chunks(bs).enumerate() {
            let trajs: Vec<&Tensor<f64>> = chunk.iter().map(|&i| &train.trajectories[i]).collect();
            let conds: Vec<Vec<f64>> = chunk.iter().map(|&i| train.conditions[i].clone()).collect();
            let crefs: Vec<&[f64]> = conds.iter().map(|c| c.as_slice()).collect();
            let x1 = self.model.norm.encode_states::<S>(&trajs)?;
            let c = self.model.norm.encode_conds::<S>(&crefs)?;
            let rep = self.step(&x1, &c, &conds, &mut rng).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {}, batch {bi}: {m}", self.epoch + 1)),
                other => other,
            })?;
            let nb = rep.rows.len() as f64;
            acc.total += rep.total;
            acc.cfm += rep.rows.iter().map(|r| r.cfm).sum::<f64>() / nb;
            for l in 0..4 {
                acc.levels[l] += rep.rows.iter().map(|r| r.levels[l]).sum::<f64>() / nb;
            }
            acc.guidance += rep.rows.iter().map(|r| r.guidance).sum::<f64>() / nb;
            acc.consist += rep.rows.iter().map(|r| r.consist).sum::<f64>() / nb;
            n_batches += 1;
        }
        let n = n_batches as f64;
        acc.total /= n;
        acc.cfm /= n;
        acc.levels.iter_mut().for_each(|l| *l /= n);
        acc.guidance /= n;
        acc.consist /= n;
        acc.wall_secs = start.elapsed().as_secs_f64();
        self.epoch += 1;
        self.trace.push(acc);
        Ok(acc)
    }

    /// Trains until `cfg.epochs` epochs have run in total, calling `on_epoch` after each.
    pub fn fit(&mut self, train: &Dataset, mut on_epoch: impl FnMut(&TraceRow)) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let row = self.run_epoch(train)?;
            on_epoch(&row);
        }
        Ok(())
    }
}

/// Checks the reported total against the per-row recombination.
pub fn recombined_total(rep: &StepReport, sched: &ConstraintSchedule) -> Result<f64> {
    total_loss_rows(&rep.rows, &rep.t, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_oscillator, OscillatorSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d_h: 8,
            unet_width: 4,
            kernel: 3,
            time_dim: 8,
            fno_width: 4,
            head_hidden: 4,
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        gen_oscillator(&OscillatorSpec {
            n_trajectories: n,
            t_len: 16,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            model: tiny_model(),
            ..Default::default()
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = AdamConfig::default();
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -2.0]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.v[0] = Tensor::from_f64(&[2], &[4.0, 4.0]).unwrap();
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg).unwrap();
        assert_eq!(p, before);
        assert!((st.v[0].data()[0] - 4.0 * 0.999).abs() < 1e-12);
        assert_eq!(st.m[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        adam_step(&mut p, &[Tensor::full(&[1], 1.0)], &mut st, &cfg).unwrap();
        assert!((p[0].data()[0] + 0.01).abs() < 1e-9);
        let bad = [Tensor::zeros(&[2])];
        assert!(adam_step(&mut p, &bad, &mut st, &cfg).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[5.0]).unwrap()];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        for _ in 0..1000 {
            let g = p[0].scale(2.0);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
    }

    #[test]
    fn clipping_never_increases_norm() {
        let mut g = vec![Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-12);
        let mut small = vec![Tensor::<f64>::from_f64(&[2], &[0.3, 0.4]).unwrap()];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
    }

    #[test]
    fn smoke_one_epoch_two_trajectories() {
        let ds = tiny_data(2);
        let pack = ds.default_pack();
        let mut tr = Trainer::<f64>::new(&ds, pack, cfg(1)).unwrap();
        tr.fit(&ds, |_| {}).unwrap();
        assert_eq!(tr.trace.len(), 1);
        assert!(tr.trace[0].total.is_finite());
    }

    #[test]
    fn reported_total_decomposes() {
        let ds = tiny_data(8);
        let pack = ds.default_pack();
        let tr = Trainer::<f64>::new(&ds, pack, cfg(1)).unwrap();
        let trajs: Vec<&Tensor<f64>> = ds.trajectories.iter().collect();
        let crefs: Vec<&[f64]> = ds.conditions.iter().map(|c| c.as_slice()).collect();
        let x1 = tr.model.norm.encode_states::<f64>(&trajs).unwrap();
        let c = tr.model.norm.encode_conds::<f64>(&crefs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rep = tr.objective(&x1, &c, &ds.conditions, &mut rng).unwrap();
        assert!(rep.rows.iter().all(|r| r.levels.iter().all(|&l| l > 0.0) && r.guidance > 0.0 && r.consist > 0.0));
        let re = recombined_total(&rep, &tr.cfg.schedule).unwrap();
        assert!((re - rep.total).abs() < 1e-10, "{re} vs {}", rep.total);
    }

    #[test]
    fn zero_weights_collapse_to_plain_flow_matching() {
        let ds = tiny_data(8);
        let pack = ds.default_pack();
        let off = TrainConfig {
            schedule: ConstraintSchedule::off(),
            guidance: GuidanceConfig::disabled(),
            ..cfg(2)
        };
        let mut a = Trainer::<f64>::new(&ds, pack, off.clone()).unwrap();
        a.fit(&ds, |_| {}).unwrap();
        for r in &a.trace {
            assert_eq!(r.total.to_bits(), r.cfm.to_bits());
            assert_eq!((r.levels, r.guidance, r.consist), ([0.0; 4], 0.0, 0.0));
        }
        // bank parameters receive no gradient, so they never move
        let b = Trainer::<f64>::new(&ds, pack, off).unwrap();
        for ((name, pa), (_, pb)) in a.model.store.iter().zip(b.model.store.iter()) {
            if name.starts_with("bank.") {
                assert_eq!(pa, pb, "{name}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_data(6);
        let pack = ds.default_pack();
        let mut a = Trainer::<f64>::new(&ds, pack, cfg(2)).unwrap();
        let mut b = Trainer::<f64>::new(&ds, pack, cfg(2)).unwrap();
        a.fit(&ds, |_| {}).unwrap();
        b.fit(&ds, |_| {}).unwrap();
        assert_eq!(a.model.store.values(), b.model.store.values());
        assert!(a.trace.iter().zip(&b.trace).all(|(x, y)| x.same_losses(y)));
    }
}
