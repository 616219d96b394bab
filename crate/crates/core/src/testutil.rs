//! Shared helpers for unit tests: random inputs and a finite-difference oracle.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub fn rand_tensor<S: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.sample::<f64, _>(StandardNormal)))
}

fn eval<G>(f: &G, inputs: &[Tensor<f64>]) -> f64
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&tape, &vars).unwrap().item()
}

/// Central differences with h = 1e-5 against the tape, over `probes` random draws.
pub fn assert_grad_matches<G>(shapes: &[Vec<usize>], probes: usize, f: G)
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let h = 1e-5;
    for probe in 0..probes {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        let grads = tape.backward(out).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let g = grads.wrt(vars[i]);
            for j in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                let mut p = x.to_vec();
                p[j] += h;
                plus[i] = Tensor::new(x.shape().to_vec(), p).unwrap();
                let mut m = x.to_vec();
                m[j] -= h;
                minus[i] = Tensor::new(x.shape().to_vec(), m).unwrap();
                let fd = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * h);
                let an = g.data()[j];
                let scale = an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (an - fd).abs() <= 1e-4 * scale,
                    "probe {probe}, input {i}, element {j}: tape {an} vs fd {fd}"
                );
            }
        }
    }
}
