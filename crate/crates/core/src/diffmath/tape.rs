//! Reverse-mode gradient tape over a fixed operation vocabulary.
//!
//! Every op appends one node holding its output value and the ids of its
//! inputs. `Tape::backward` walks the nodes in exact reverse order of
//! execution, so a node's gradient is complete before it is propagated.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::fft;
use super::tensor::{strides, Tensor};

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Offset(usize),
    Matmul(usize, usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Relu(usize),
    Square(usize),
    Recip(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { a: usize, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape(usize),
    Permute { a: usize, perm: Vec<usize> },
    CumSum(usize),
    RfftRe { a: usize, n: usize },
    RfftIm { a: usize, n: usize },
    Irfft { re: usize, im: usize },
    Conv1d { x: usize, w: usize },
    AvgPool2(usize),
    Upsample(usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Record of executed operations. One tape per forward/backward pass.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by variable.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if the output does not depend on it.
    pub fn wrt(&self, v: Var<'_, S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant during backward.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var<'_, S>) -> Tensor<S> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[usize]) -> Result<Var<'_, S>> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let needs = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        let op = if needs { op } else { Op::Leaf };
        Ok(self.push(value, op, needs))
    }

    /// Reverse pass from the scalar `output`. A tape may be consumed once.
    pub fn backward(&self, output: Var<'_, S>) -> Result<Gradients<S>> {
        if self.consumed.get() {
            return Err(Error::Tape("backward called twice on a consumed tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), S::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            for (input, gi) in node_backward(&nodes, id, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                accumulate(&mut grads[input], gi);
            }
        }
        // Only leaves and interior nodes that required grad are reported.
        for (g, n) in grads.iter_mut().zip(nodes.iter()) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev.add(&g).expect("gradient shapes agree"),
    });
}

// ----- variable API ---------------------------------------------------------

impl<'t, S: Scalar> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> S {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor<S>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn with_values2<R>(&self, other: &Var<'t, S>, f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.id].value, &nodes[other.id].value)
    }

    fn unary(&self, name: &'static str, op: Op<S>, f: impl Fn(S) -> S) -> Result<Self> {
        let v = self.with_value(|a| a.map(f));
        self.tape.record(name, v, op, &[self.id])
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let v = self.with_values2(other, |a, b| broadcast_binary("add", a, b, |x, y| x + y))?;
        self.tape.record("add", v, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let v = self.with_values2(other, |a, b| broadcast_binary("sub", a, b, |x, y| x - y))?;
        self.tape.record("sub", v, Op::Sub(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let v = self.with_values2(other, |a, b| broadcast_binary("mul", a, b, |x, y| x * y))?;
        self.tape.record("mul", v, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        let k = S::lit(k);
        self.unary("scale", Op::Scale(self.id, k), |x| x * k)
    }

    pub fn neg(&self) -> Result<Self> {
        self.scale(-1.0)
    }

    pub fn offset(&self, k: f64) -> Result<Self> {
        let k = S::lit(k);
        self.unary("offset", Op::Offset(self.id), |x| x + k)
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary("exp", Op::Exp(self.id), |x| x.exp())
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary("tanh", Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn gelu(&self) -> Result<Self> {
        self.unary("gelu", Op::Gelu(self.id), |x| gelu(x).0)
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(S::zero()))
    }

    pub fn square(&self) -> Result<Self> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn recip(&self) -> Result<Self> {
        self.unary("recip", Op::Recip(self.id), |x| S::one() / x)
    }

    /// Square root; the input must be strictly positive for a finite gradient.
    pub fn sqrt(&self) -> Result<Self> {
        self.unary("sqrt", Op::Sqrt(self.id), |x| x.sqrt())
    }

    pub fn sum(&self) -> Result<Self> {
        let v = self.with_value(|a| Tensor::scalar(a.sum()));
        self.tape.record("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Self> {
        let v = self.with_value(|a| Tensor::scalar(a.mean()));
        self.tape.record("mean", v, Op::Mean(self.id), &[self.id])
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let v = self.with_value(|a| sum_axis(a, axis))?;
        self.tape.record("sum_axis", v, Op::SumAxis { a: self.id, axis }, &[self.id])
    }

    /// Mean squared difference `mean((self - other)^2)`.
    pub fn mse(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape("mse", &self.shape(), &other.shape()));
        }
        self.sub(other)?.square()?.mean()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let v = self.with_values2(other, matmul_forward)?;
        self.tape
            .record("matmul", v, Op::Matmul(self.id, other.id), &[self.id, other.id])
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let v = self.with_value(|a| slice(a, axis, start, len))?;
        self.tape
            .record("slice", v, Op::Slice { a: self.id, axis, start }, &[self.id])
    }

    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero parts"))?;
        let tape = first.tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor<S>> = parts.iter().map(|p| &nodes[p.id].value).collect();
            concat(&vals, axis)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.record("concat", v, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.with_value(|a| a.reshape(shape))?;
        self.tape.record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let v = self.with_value(|a| permute(a, perm))?;
        self.tape.record(
            "permute",
            v,
            Op::Permute {
                a: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        )
    }

    /// Running sum along the trailing axis.
    pub fn cumsum(&self) -> Result<Self> {
        let v = self.with_value(cumsum);
        self.tape.record("cumsum", v, Op::CumSum(self.id), &[self.id])
    }

    /// Real FFT along the trailing axis, returning `(re, im)` planes.
    pub fn rfft(&self) -> Result<(Self, Self)> {
        let (re, im) = self.with_value(fft::rfft)?;
        let n = *self.shape().last().unwrap();
        let r = self.tape.record("rfft", re, Op::RfftRe { a: self.id, n }, &[self.id])?;
        let i = self.tape.record("rfft", im, Op::RfftIm { a: self.id, n }, &[self.id])?;
        Ok((r, i))
    }

    /// Inverse real FFT of the leading modes `(re, im)` to length `n`.
    pub fn irfft(re: &Self, im: &Self, n: usize) -> Result<Self> {
        let v = re.with_values2(im, |a, b| fft::irfft(a, b, n))?;
        re.tape.record(
            "irfft",
            v,
            Op::Irfft {
                re: re.id,
                im: im.id,
            },
            &[re.id, im.id],
        )
    }

    /// Same-padded stride-1 convolution: `x [B, Cin, L]`, `w [Cout, Cin, K]`, odd `K`.
    pub fn conv1d(&self, w: &Self) -> Result<Self> {
        let v = self.with_values2(w, conv1d_forward)?;
        self.tape
            .record("conv1d", v, Op::Conv1d { x: self.id, w: w.id }, &[self.id, w.id])
    }

    /// Mean of adjacent pairs along the trailing axis (odd tail kept as is).
    pub fn avg_pool2(&self) -> Result<Self> {
        let v = self.with_value(avg_pool2);
        self.tape.record("avg_pool2", v, Op::AvgPool2(self.id), &[self.id])
    }

    /// Nearest-neighbour resampling of the trailing axis to `len`.
    pub fn upsample(&self, len: usize) -> Result<Self> {
        let v = self.with_value(|a| upsample(a, len));
        self.tape.record("upsample", v, Op::Upsample(self.id), &[self.id])
    }
}

macro_rules! var_binop {
    ($tr:ident, $m:ident, $f:ident) => {
        impl<'t, S: Scalar> std::ops::$tr for Var<'t, S> {
            type Output = Result<Var<'t, S>>;
            fn $m(self, rhs: Self) -> Self::Output {
                Var::$f(&self, &rhs)
            }
        }
    };
}
var_binop!(Add, add, add);
var_binop!(Sub, sub, sub);
var_binop!(Mul, mul, mul);

// ----- scalar kernels --------------------------------------------------------

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Tanh-form GELU and its derivative.
pub(crate) fn gelu<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let val = half * x * (S::one() + th);
    let dinner = c * (S::one() + S::lit(3.0) * k * x * x);
    let d = half * (S::one() + th) + half * x * (S::one() - th * th) * dinner;
    (val, d)
}

// ----- broadcasting ---------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let r = out.len();
    (0..r)
        .map(|i| {
            if i + shape.len() < r {
                0
            } else {
                let j = i + shape.len() - r;
                if shape[j] == 1 {
                    0
                } else {
                    st[j]
                }
            }
        })
        .collect()
}

/// Visit every output index with the matching offsets into two inputs.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let r = out.len();
    let inner = out[r - 1];
    let (ia, ib) = (sa[r - 1], sb[r - 1]);
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // advance outer counters
        let mut ax = r - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_binary<S: Scalar>(
    name: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, name, f);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
    let sa = bcast_strides(a.shape(), &out);
    let sb = bcast_strides(b.shape(), &out);
    let mut data = vec![S::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_bcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sum `g` (shaped like the broadcast output) back down to `shape`.
fn reduce_to<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape().to_vec();
    let s_in = bcast_strides(shape, &out);
    let zero = vec![0; out.len()];
    let mut acc = vec![S::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_bcast(&out, &s_in, &zero, |o, ia, _| acc[ia] += gd[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}

// ----- structural kernels ---------------------------------------------------

fn sum_axis<S: Scalar>(a: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let sh = a.shape();
    if axis >= sh.len() {
        return Err(Error::invalid(format!("sum_axis: axis {axis} out of rank {}", sh.len())));
    }
    let outer: usize = sh[..axis].iter().product();
    let mid = sh[axis];
    let inner: usize = sh[axis + 1..].iter().product();
    let mut out = vec![S::zero(); outer * inner];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner;
            for i in 0..inner {
                out[o * inner + i] += a.data()[base + i];
            }
        }
    }
    let mut shape: Vec<usize> = sh.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

fn slice<S: Scalar>(a: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
    let sh = a.shape();
    if axis >= sh.len() || len == 0 || start + len > sh[axis] {
        return Err(Error::invalid(format!(
            "slice [{start}, {}) on axis {axis} of shape {sh:?}",
            start + len
        )));
    }
    let outer: usize = sh[..axis].iter().product();
    let inner: usize = sh[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * sh[axis] + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut shape = sh.to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(Error::invalid(format!("concat: axis {axis} out of rank {}", first.len())));
    }
    for p in parts {
        let ok = p.shape().len() == first.len()
            && p.shape().iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", first, p.shape()));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let w = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

fn permute<S: Scalar>(a: &Tensor<S>, perm: &[usize]) -> Result<Tensor<S>> {
    let sh = a.shape();
    let r = sh.len();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::invalid(format!("permute: {perm:?} is not a permutation of rank {r}")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| sh[p]).collect();
    let st = strides(sh);
    let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; r];
    let mut out = vec![S::zero(); a.len()];
    let d = a.data();
    for_each_bcast(&out_shape, &src_strides, &zero, |o, s, _| out[o] = d[s]);
    Ok(Tensor::from_parts(out_shape, out))
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn cumsum<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let n = *a.shape().last().unwrap();
    let mut out = a.to_vec();
    for row in out.chunks_mut(n) {
        for j in 1..n {
            let prev = row[j - 1];
            row[j] += prev;
        }
    }
    Tensor::from_parts(a.shape().to_vec(), out)
}

fn reverse_cumsum<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let n = *g.shape().last().unwrap();
    let mut out = g.to_vec();
    for row in out.chunks_mut(n) {
        for j in (0..n - 1).rev() {
            let next = row[j + 1];
            row[j] += next;
        }
    }
    Tensor::from_parts(g.shape().to_vec(), out)
}

fn avg_pool2<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let n = *a.shape().last().unwrap();
    let m = n.div_ceil(2);
    let half = S::lit(0.5);
    let mut out = Vec::with_capacity(a.len() / n * m);
    for row in a.data().chunks(n) {
        for j in 0..m {
            if 2 * j + 1 < n {
                out.push(half * (row[2 * j] + row[2 * j + 1]));
            } else {
                out.push(row[2 * j]);
            }
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::from_parts(shape, out)
}

fn avg_pool2_backward<S: Scalar>(g: &Tensor<S>, n: usize) -> Tensor<S> {
    let m = *g.shape().last().unwrap();
    let half = S::lit(0.5);
    let mut out = Vec::with_capacity(g.len() / m * n);
    for row in g.data().chunks(m) {
        for i in 0..n {
            let j = i / 2;
            out.push(if 2 * j + 1 < n { half * row[j] } else { row[j] });
        }
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::from_parts(shape, out)
}

fn upsample_index(j: usize, src: usize, dst: usize) -> usize {
    (j * src / dst).min(src - 1)
}

fn upsample<S: Scalar>(a: &Tensor<S>, len: usize) -> Tensor<S> {
    let n = *a.shape().last().unwrap();
    let mut out = Vec::with_capacity(a.len() / n * len);
    for row in a.data().chunks(n) {
        for j in 0..len {
            out.push(row[upsample_index(j, n, len)]);
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::from_parts(shape, out)
}

fn upsample_backward<S: Scalar>(g: &Tensor<S>, n: usize) -> Tensor<S> {
    let len = *g.shape().last().unwrap();
    let rows = g.len() / len;
    let mut out = vec![S::zero(); rows * n];
    for (r, row) in g.data().chunks(len).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[r * n + upsample_index(j, n, len)] += v;
        }
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::from_parts(shape, out)
}

// ----- matmul ---------------------------------------------------------------

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", a, b);
    let (ab, m, k) = match a {
        [m, k] => (None, *m, *k),
        [g, m, k] => (Some(*g), *m, *k),
        _ => return Err(err()),
    };
    let (bb, k2, n) = match b {
        [k, n] => (None, *k, *n),
        [g, k, n] => (Some(*g), *k, *n),
        _ => return Err(err()),
    };
    if k != k2 {
        return Err(err());
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => return Err(err()),
        (Some(x), _) | (_, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatmulDims {
        batch,
        m,
        k,
        n,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

fn matmul_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![S::zero(); d.batch * d.m * d.n];
    for g in 0..d.batch {
        let ao = if d.a_batched { g * d.m * d.k } else { 0 };
        let bo = if d.b_batched { g * d.k * d.n } else { 0 };
        S::gemm(
            d.m,
            d.k,
            d.n,
            S::one(),
            &a.data()[ao..],
            d.k as isize,
            1,
            &b.data()[bo..],
            d.n as isize,
            1,
            S::zero(),
            &mut out[g * d.m * d.n..],
            d.n as isize,
            1,
        );
    }
    let shape = if d.a_batched || d.b_batched {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Ok(Tensor::from_parts(shape, out))
}

fn matmul_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated on forward");
    let mut ga = vec![S::zero(); a.len()];
    let mut gb = vec![S::zero(); b.len()];
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
        let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
        let go = bi * d.m * d.n;
        // dA = dC B^T
        S::gemm(
            d.m,
            d.n,
            d.k,
            S::one(),
            &g.data()[go..],
            d.n as isize,
            1,
            &b.data()[bo..],
            1,
            d.n as isize,
            S::one(),
            &mut ga[ao..],
            d.k as isize,
            1,
        );
        // dB = A^T dC
        S::gemm(
            d.k,
            d.m,
            d.n,
            S::one(),
            &a.data()[ao..],
            1,
            d.k as isize,
            &g.data()[go..],
            d.n as isize,
            1,
            S::one(),
            &mut gb[bo..],
            d.n as isize,
            1,
        );
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

// ----- conv1d ----------------------------------------------------------------

struct ConvDims {
    batch: usize,
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
}

fn conv_dims(x: &[usize], w: &[usize]) -> Result<ConvDims> {
    match (x, w) {
        ([b, ci, l], [co, ci2, k]) if ci == ci2 && k % 2 == 1 => Ok(ConvDims {
            batch: *b,
            cin: *ci,
            len: *l,
            cout: *co,
            k: *k,
        }),
        _ => Err(Error::shape("conv1d", x, w)),
    }
}

/// Unfold one batch element into a `[cin*k, len]` column matrix.
fn im2col<S: Scalar>(x: &[S], d: &ConvDims, col: &mut [S]) {
    let pad = d.k / 2;
    for i in 0..d.cin {
        let row = &x[i * d.len..(i + 1) * d.len];
        for kk in 0..d.k {
            let dst = &mut col[(i * d.k + kk) * d.len..(i * d.k + kk + 1) * d.len];
            for (l, out) in dst.iter_mut().enumerate() {
                let src = l as isize + kk as isize - pad as isize;
                *out = if src >= 0 && (src as usize) < d.len {
                    row[src as usize]
                } else {
                    S::zero()
                };
            }
        }
    }
}

fn conv1d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let d = conv_dims(x.shape(), w.shape())?;
    let ck = d.cin * d.k;
    let mut col = vec![S::zero(); ck * d.len];
    let mut out = vec![S::zero(); d.batch * d.cout * d.len];
    for b in 0..d.batch {
        im2col(&x.data()[b * d.cin * d.len..], &d, &mut col);
        S::gemm(
            d.cout,
            ck,
            d.len,
            S::one(),
            w.data(),
            ck as isize,
            1,
            &col,
            d.len as isize,
            1,
            S::zero(),
            &mut out[b * d.cout * d.len..],
            d.len as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.len], out))
}

fn conv1d_backward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let d = conv_dims(x.shape(), w.shape()).expect("validated on forward");
    let ck = d.cin * d.k;
    let pad = d.k / 2;
    let mut col = vec![S::zero(); ck * d.len];
    let mut dcol = vec![S::zero(); ck * d.len];
    let mut gw = vec![S::zero(); w.len()];
    let mut gx = vec![S::zero(); x.len()];
    for b in 0..d.batch {
        let gb = &g.data()[b * d.cout * d.len..];
        im2col(&x.data()[b * d.cin * d.len..], &d, &mut col);
        // dW += dOut col^T
        S::gemm(
            d.cout,
            d.len,
            ck,
            S::one(),
            gb,
            d.len as isize,
            1,
            &col,
            1,
            d.len as isize,
            S::one(),
            &mut gw,
            ck as isize,
            1,
        );
        // dcol = W^T dOut
        S::gemm(
            ck,
            d.cout,
            d.len,
            S::one(),
            w.data(),
            1,
            ck as isize,
            gb,
            d.len as isize,
            1,
            S::zero(),
            &mut dcol,
            d.len as isize,
            1,
        );
        let gxb = &mut gx[b * d.cin * d.len..(b + 1) * d.cin * d.len];
        for i in 0..d.cin {
            for kk in 0..d.k {
                let src = &dcol[(i * d.k + kk) * d.len..(i * d.k + kk + 1) * d.len];
                for (l, &v) in src.iter().enumerate() {
                    let pos = l as isize + kk as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < d.len {
                        gxb[i * d.len + pos as usize] += v;
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
    )
}

// ----- backward dispatch -----------------------------------------------------

fn node_backward<S: Scalar>(nodes: &[Node<S>], id: usize, g: &Tensor<S>) -> Vec<(usize, Tensor<S>)> {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    let map2 = |a: &Tensor<S>, f: &dyn Fn(S, S) -> S| {
        Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(g.data()).map(|(&x, &gg)| f(x, gg)).collect(),
        )
    };
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(&g.scale(-S::one()), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = broadcast_binary("mul", g, vb, |x, y| x * y).expect("forward shapes");
            let gb = broadcast_binary("mul", g, va, |x, y| x * y).expect("forward shapes");
            vec![(*a, reduce_to(&ga, va.shape())), (*b, reduce_to(&gb, vb.shape()))]
        }
        Op::Scale(a, k) => vec![(*a, g.scale(*k))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Matmul(a, b) => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Exp(a) => vec![(*a, out.zip_map(g, "exp", |y, gg| y * gg).unwrap())],
        Op::Sigmoid(a) => vec![(*a, out.zip_map(g, "sigmoid", |y, gg| y * (S::one() - y) * gg).unwrap())],
        Op::Tanh(a) => vec![(*a, out.zip_map(g, "tanh", |y, gg| (S::one() - y * y) * gg).unwrap())],
        Op::Gelu(a) => vec![(*a, map2(val(*a), &|x, gg| gelu(x).1 * gg))],
        Op::Relu(a) => vec![(
            *a,
            map2(val(*a), &|x, gg| if x > S::zero() { gg } else { S::zero() }),
        )],
        Op::Square(a) => vec![(*a, map2(val(*a), &|x, gg| S::lit(2.0) * x * gg))],
        Op::Recip(a) => vec![(*a, out.zip_map(g, "recip", |y, gg| -y * y * gg).unwrap())],
        Op::Sqrt(a) => vec![(
            *a,
            out.zip_map(g, "sqrt", |y, gg| gg / (S::lit(2.0) * y)).unwrap(),
        )],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = S::from_usize(val(*a).len()).unwrap();
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::SumAxis { a, axis } => {
            let sh = val(*a).shape().to_vec();
            let mut kept = sh.clone();
            kept[*axis] = 1;
            let gk = g.reshape(&kept).expect("sum_axis grad reshape");
            let ones = Tensor::full(&sh, S::one());
            vec![(*a, broadcast_binary("sum_axis", &ones, &gk, |x, y| x * y).unwrap())]
        }
        Op::Slice { a, axis, start } => {
            let sh = val(*a).shape().to_vec();
            let outer: usize = sh[..*axis].iter().product();
            let inner: usize = sh[*axis + 1..].iter().product();
            let len = g.shape()[*axis];
            let mut full = vec![S::zero(); val(*a).len()];
            for o in 0..outer {
                let dst = (o * sh[*axis] + start) * inner;
                let src = o * len * inner;
                full[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*a, Tensor::from_parts(sh, full))]
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = val(p).shape()[*axis];
                    let piece = slice(g, *axis, start, len).expect("concat grad slice");
                    start += len;
                    (p, piece)
                })
                .collect()
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        Op::Permute { a, perm } => vec![(*a, permute(g, &inverse_perm(perm)).unwrap())],
        Op::CumSum(a) => vec![(*a, reverse_cumsum(g))],
        Op::RfftRe { a, n } => vec![(*a, fft::rfft_adjoint(g, *n, false))],
        Op::RfftIm { a, n } => vec![(*a, fft::rfft_adjoint(g, *n, true))],
        Op::Irfft { re, im } => {
            let m = *val(*re).shape().last().unwrap();
            let (gr, gi) = fft::irfft_adjoint(g, m);
            vec![(*re, gr), (*im, gi)]
        }
        Op::Conv1d { x, w } => {
            let (gx, gw) = conv1d_backward(val(*x), val(*w), g);
            vec![(*x, gx), (*w, gw)]
        }
        Op::AvgPool2(a) => vec![(*a, avg_pool2_backward(g, *val(*a).shape().last().unwrap()))],
        Op::Upsample(a) => vec![(*a, upsample_backward(g, *val(*a).shape().last().unwrap()))],
    }
}
