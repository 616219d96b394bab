//! Parameter storage and the small layer kit shared by the networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shape("set_param", old.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    /// Replace every value, keeping names and order.
    pub fn replace_values(&mut self, values: Vec<Tensor<S>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter arrays, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (old, new) in self.values.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(Error::shape("replace_values", old.shape(), new.shape()));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Put every parameter on `tape`, as differentiable leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> Bound<'t, S> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t, S: Scalar> {
    tape: &'t Tape<S>,
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn var(&self, id: ParamId) -> Var<'t, S> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'t, S> {
        self.tape.constant(t)
    }
}

/// Uniform `[-b, b]` with `b = 1/sqrt(fan_in)`.
pub fn uniform_init<S: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    let d = Uniform::new_inclusive(-b, b).expect("finite bound");
    Tensor::from_fn(shape, |_| S::lit(d.sample(rng)))
}

pub fn normal_init<S: Scalar>(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(scale * rng.sample::<f64, _>(StandardNormal)))
}

/// Dense layer `y = x W + b` on the trailing axis.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[d_in, d_out], d_in));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_init(rng, &[d_out], d_in)));
        Self { w, b, d_in, d_out }
    }

    /// Zero the weights and bias so the layer outputs zeros.
    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.set(self.w, Tensor::zeros(&[self.d_in, self.d_out])).unwrap();
        if let Some(b) = self.b {
            store.set(b, Tensor::zeros(&[self.d_out])).unwrap();
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.matmul(&p.var(self.w))?;
        match self.b {
            Some(b) => y.add(&p.var(b)),
            None => Ok(y),
        }
    }
}

/// Two dense layers with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), d_in, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, d_out, true, rng),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let h = self.l1.forward(p, x)?.gelu()?;
        self.l2.forward(p, &h)
    }
}

/// Same-padded 1-D convolution over `[B, C, L]` with optional per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv1d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * k;
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[c_out, c_in, k], fan_in));
        let b = bias.then(|| store.add(format!("{name}.b"), uniform_init(rng, &[c_out, 1], fan_in)));
        Self { w, b, c_in, c_out, k }
    }

    pub fn zero<S: Scalar>(&self, store: &mut ParamStore<S>) {
        store.set(self.w, Tensor::zeros(&[self.c_out, self.c_in, self.k])).unwrap();
        if let Some(b) = self.b {
            store.set(b, Tensor::zeros(&[self.c_out, 1])).unwrap();
        }
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        let y = x.conv1d(&p.var(self.w))?;
        match self.b {
            Some(b) => y.add(&p.var(b)),
            None => Ok(y),
        }
    }
}

/// Softmax along the trailing axis.
pub fn softmax<'t, S: Scalar>(x: &Var<'t, S>) -> Result<Var<'t, S>> {
    let shape = x.shape();
    let k = *shape.last().unwrap();
    // Subtracting the row max leaves softmax and its gradient unchanged.
    let maxes: Vec<S> = x
        .value()
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(S::neg_infinity(), S::max))
        .collect();
    let mut row_shape = shape.clone();
    *row_shape.last_mut().unwrap() = 1;
    let shift = x.tape().constant(Tensor::new(row_shape.clone(), maxes)?);
    let e = x.sub(&shift)?.exp()?;
    let z = e.sum_axis(shape.len() - 1)?.reshape(&row_shape)?;
    e.mul(&z.recip()?)
}
