//! Spectral convolution layers and the four-level operator bank.
//!
//! Trajectory batches are channels-first, `[B, C, T]`, so the FFT runs
//! along the trailing (time) axis.

use rand::Rng;

use crate::diffmath::{spectrum_len, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{softmax, Bound, Conv1d, Mlp2, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Half-open range of retained Fourier modes `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Band {
    pub lo: usize,
    pub hi: usize,
}

impl Band {
    pub fn width(&self) -> usize {
        self.hi - self.lo
    }

    pub fn contains(&self, k: usize) -> bool {
        (self.lo..self.hi).contains(&k)
    }

    /// Frequency band of a hierarchy level for length-`t_len` signals.
    pub fn for_level(level: usize, t_len: usize) -> Result<Self> {
        let m = spectrum_len(t_len);
        let (lo, hi) = match level {
            1 => (0, m / 4),
            2 => (m / 8, m / 2),
            3 => (m / 4, m),
            4 => (0, m),
            _ => return Err(Error::invalid(format!("operator level must be 1..=4, got {level}"))),
        };
        Ok(Self { lo, hi })
    }
}

/// Layer depth of each hierarchy level.
pub const LEVEL_DEPTHS: [usize; 4] = [4, 3, 2, 2];

/// `irfft(R * band(rfft(u))) + W u` for `u: [B, Cin, T]`.
///
/// `wr`, `wi` are the real and imaginary planes of `R` with shape
/// `[band.width(), Cin, Cout]`; `bypass` is `W` as a `[Cout, Cin, 1]` kernel.
pub fn spectral_conv<'t, S: Scalar>(
    u: &Var<'t, S>,
    wr: Option<&Var<'t, S>>,
    wi: Option<&Var<'t, S>>,
    band: Band,
    c_out: usize,
    bypass: Option<&Var<'t, S>>,
) -> Result<Var<'t, S>> {
    let shape = u.shape();
    let [b, c_in, t_len] = shape[..] else {
        return Err(Error::invalid(format!("spectral_conv expects [B, C, T], got {shape:?}")));
    };
    let m_full = spectrum_len(t_len);
    if band.hi > m_full || band.lo > band.hi {
        return Err(Error::invalid(format!(
            "modes [{}, {}) exceed spectrum length {m_full} for T = {t_len}",
            band.lo, band.hi
        )));
    }
    let tape = u.tape();
    let spectral = match (wr, wi) {
        (Some(wr), Some(wi)) if band.width() > 0 => {
            let m = band.width();
            if wr.shape() != [m, c_in, c_out] || wi.shape() != [m, c_in, c_out] {
                return Err(Error::shape("spectral_conv", &[m, c_in, c_out], &wr.shape()));
            }
            let (re, im) = u.rfft()?;
            // [B, Cin, m] -> [m, B, Cin] for a batched product over modes.
            let re = re.slice(2, band.lo, m)?.permute(&[2, 0, 1])?;
            let im = im.slice(2, band.lo, m)?.permute(&[2, 0, 1])?;
            let yr = re.matmul(wr)?.sub(&im.matmul(wi)?)?;
            let yi = re.matmul(wi)?.add(&im.matmul(wr)?)?;
            let mut yr = yr.permute(&[1, 2, 0])?;
            let mut yi = yi.permute(&[1, 2, 0])?;
            if band.lo > 0 {
                let pad = tape.constant(Tensor::zeros(&[b, c_out, band.lo]));
                yr = Var::concat(&[pad, yr], 2)?;
                yi = Var::concat(&[pad, yi], 2)?;
            }
            Some(Var::irfft(&yr, &yi, t_len)?)
        }
        _ => None,
    };
    let direct = bypass.map(|w| u.conv1d(w)).transpose()?;
    match (spectral, direct) {
        (Some(s), Some(d)) => s.add(&d),
        (Some(s), None) => Ok(s),
        (None, Some(d)) => Ok(d),
        (None, None) => Ok(tape.constant(Tensor::zeros(&[b, c_out, t_len]))),
    }
}

#[derive(Debug, Clone)]
pub struct SpectralConvLayer {
    pub band: Band,
    pub c_in: usize,
    pub c_out: usize,
    pub wr: Option<ParamId>,
    pub wi: Option<ParamId>,
    pub bypass: ParamId,
}

impl SpectralConvLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        band: Band,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / (c_in * c_out) as f64;
        let m = band.width();
        let mut planes = [None, None];
        if m > 0 {
            for (slot, suffix) in planes.iter_mut().zip(["wr", "wi"]) {
                let t = Tensor::from_fn(&[m, c_in, c_out], |_| S::lit(scale * rng.random::<f64>()));
                *slot = Some(store.add(format!("{name}.{suffix}"), t));
            }
        }
        let [wr, wi] = planes;
        let bypass = Conv1d::new(store, &format!("{name}.bypass"), c_in, c_out, 1, false, rng).w;
        Self {
            band,
            c_in,
            c_out,
            wr,
            wi,
            bypass,
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, u: &Var<'t, S>) -> Result<Var<'t, S>> {
        let wr = self.wr.map(|id| p.var(id));
        let wi = self.wi.map(|id| p.var(id));
        spectral_conv(u, wr.as_ref(), wi.as_ref(), self.band, self.c_out, Some(&p.var(self.bypass)))
    }
}

/// One hierarchical operator: pointwise lift, a spectral stack restricted to
/// the level's band, and a bias-free pointwise projection.
#[derive(Debug, Clone)]
pub struct Operator {
    pub level: usize,
    pub lift: Conv1d,
    pub layers: Vec<SpectralConvLayer>,
    pub proj: Conv1d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    pub t_len: usize,
    pub state_dim: usize,
    pub cond_dim: usize,
    pub width: usize,
    pub head_input: usize,
    pub head_hidden: usize,
}

impl Operator {
    fn new<S: Scalar>(store: &mut ParamStore<S>, level: usize, cfg: &BankConfig, rng: &mut impl Rng) -> Result<Self> {
        let band = Band::for_level(level, cfg.t_len)?;
        let name = format!("bank.o{level}");
        let c_lift = cfg.state_dim + cfg.cond_dim + 1;
        let lift = Conv1d::new(store, &format!("{name}.lift"), c_lift, cfg.width, 1, true, rng);
        let layers = (0..LEVEL_DEPTHS[level - 1])
            .map(|i| SpectralConvLayer::new(store, &format!("{name}.spec{i}"), band, cfg.width, cfg.width, rng))
            .collect();
        let proj = Conv1d::new(store, &format!("{name}.proj"), cfg.width, cfg.state_dim, 1, false, rng);
        Ok(Self {
            level,
            lift,
            layers,
            proj,
        })
    }

    /// `u: [B, D, T]`, `c: [B, dc]` -> `[B, D, T]`.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, u: &Var<'t, S>, c: &Var<'t, S>) -> Result<Var<'t, S>> {
        let z = lift_input(u, c)?;
        let mut h = self.lift.forward(p, &z)?;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i + 1 < n {
                h = h.gelu()?;
            }
        }
        self.proj.forward(p, &h)
    }
}

/// Stack state channels, condition broadcast over time, and a time grid.
fn lift_input<'t, S: Scalar>(u: &Var<'t, S>, c: &Var<'t, S>) -> Result<Var<'t, S>> {
    let shape = u.shape();
    let [b, _, t_len] = shape[..] else {
        return Err(Error::invalid(format!("operator input must be [B, D, T], got {shape:?}")));
    };
    if t_len < 8 {
        return Err(Error::invalid(format!("operator input needs at least 8 steps, got {t_len}")));
    }
    let cs = c.shape();
    if cs.len() != 2 || cs[0] != b {
        return Err(Error::shape("lift_input", &shape, &cs));
    }
    let tape = u.tape();
    let zeros = tape.constant(Tensor::zeros(&[b, cs[1], t_len]));
    let cb = c.reshape(&[b, cs[1], 1])?.add(&zeros)?;
    let grid = tape.constant(Tensor::from_fn(&[b, 1, t_len], |i| {
        S::lit((i % t_len) as f64 / t_len as f64)
    }));
    Var::concat(&[*u, cb, grid], 1)
}

/// The four hierarchical operators plus the condition-adaptive weight head.
#[derive(Debug, Clone)]
pub struct OperatorBank {
    pub cfg: BankConfig,
    pub ops: Vec<Operator>,
    pub head: Mlp2,
}

impl OperatorBank {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: BankConfig, rng: &mut impl Rng) -> Result<Self> {
        let ops = (1..=4)
            .map(|lvl| Operator::new(store, lvl, &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Mlp2::new(store, "bank.head", cfg.head_input, cfg.head_hidden, 4, rng);
        // Zero final layer: the mixture starts uniform.
        head.l2.zero(store);
        Ok(Self { cfg, ops, head })
    }

    pub fn operator_forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        level: usize,
        u: &Var<'t, S>,
        c: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        if !(1..=4).contains(&level) {
            return Err(Error::invalid(format!("operator level must be 1..=4, got {level}")));
        }
        self.ops[level - 1].forward(p, u, c)
    }

    /// Mixture weights `w(h_c)` on the 4-simplex, `[B, 4]`.
    pub fn weights<'t, S: Scalar>(&self, p: &Bound<'t, S>, h_c: &Var<'t, S>) -> Result<Var<'t, S>> {
        softmax(&self.head.forward(p, h_c)?)
    }

    /// All four operator outputs, the mixture weights, and `u_FNO`.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        u: &Var<'t, S>,
        c: &Var<'t, S>,
        h_c: &Var<'t, S>,
    ) -> Result<BankOutput<'t, S>> {
        let outs = (1..=4)
            .map(|lvl| self.operator_forward(p, lvl, u, c))
            .collect::<Result<Vec<_>>>()?;
        let w = self.weights(p, h_c)?;
        let mixed = integrate(&outs, &w)?;
        Ok(BankOutput { outs, w, mixed })
    }
}

pub struct BankOutput<'t, S: Scalar> {
    pub outs: Vec<Var<'t, S>>,
    pub w: Var<'t, S>,
    pub mixed: Var<'t, S>,
}

/// `sum_i w[:, i] * outs[i]` for outputs `[B, D, T]` and weights `[B, K]`.
pub fn integrate<'t, S: Scalar>(outs: &[Var<'t, S>], w: &Var<'t, S>) -> Result<Var<'t, S>> {
    let ws = w.shape();
    if ws.len() != 2 || ws[1] != outs.len() {
        return Err(Error::shape("integrate", &ws, &[outs.len()]));
    }
    let mut acc: Option<Var<'t, S>> = None;
    for (i, o) in outs.iter().enumerate() {
        let wi = w.slice(1, i, 1)?.reshape(&[ws[0], 1, 1])?;
        let term = o.mul(&wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    acc.ok_or_else(|| Error::invalid("integrate of zero operators"))
}
