//! Real-input discrete Fourier transforms along the trailing axis.
//!
//! Spectra are carried as separate real and imaginary planes so the
//! gradient tape only ever sees real tensors. The forward transform is
//! unnormalised; the inverse divides by `N`.

use std::any::Any;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

type PlanKey = (&'static str, usize, bool);

fn plans() -> &'static Mutex<HashMap<PlanKey, Arc<dyn Any + Send + Sync>>> {
    static PLANS: OnceLock<Mutex<HashMap<PlanKey, Arc<dyn Any + Send + Sync>>>> = OnceLock::new();
    PLANS.get_or_init(|| Mutex::new(HashMap::new()))
}

fn plan<S: Scalar>(n: usize, inverse: bool) -> Arc<dyn Fft<S>> {
    let key = (S::DTYPE, n, inverse);
    let mut map = plans().lock().expect("fft plan cache poisoned");
    let entry = map.entry(key).or_insert_with(|| {
        let mut planner = FftPlanner::<S>::new();
        let p = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        Arc::new(p) as Arc<dyn Any + Send + Sync>
    });
    entry
        .downcast_ref::<Arc<dyn Fft<S>>>()
        .expect("plan cache keyed by dtype")
        .clone()
}

/// Number of non-redundant modes of a length-`n` real signal.
pub fn spectrum_len(n: usize) -> usize {
    n / 2 + 1
}

fn check_len(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!("FFT length must be >= 2, got {n}")));
    }
    Ok(())
}

/// Forward real FFT of every trailing-axis row; returns `(re, im)` planes
/// with trailing extent `n/2 + 1`.
pub fn rfft<S: Scalar>(u: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    let n = *u.shape().last().unwrap();
    check_len(n)?;
    let m = spectrum_len(n);
    let rows = u.len() / n;
    let mut buf: Vec<Complex<S>> = u.data().iter().map(|&v| Complex::new(v, S::zero())).collect();
    plan::<S>(n, false).process(&mut buf);
    let mut re = Vec::with_capacity(rows * m);
    let mut im = Vec::with_capacity(rows * m);
    for r in 0..rows {
        for z in &buf[r * n..r * n + m] {
            re.push(z.re);
            im.push(z.im);
        }
    }
    let mut shape = u.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Ok((Tensor::from_parts(shape.clone(), re), Tensor::from_parts(shape, im)))
}

/// Inverse real FFT producing rows of length `n` from the leading modes in
/// `(re, im)`. Fewer than `n/2 + 1` modes means the rest are zero. The
/// imaginary parts of the DC (and, for even `n`, Nyquist) modes are ignored.
pub fn irfft<S: Scalar>(re: &Tensor<S>, im: &Tensor<S>, n: usize) -> Result<Tensor<S>> {
    check_len(n)?;
    if re.shape() != im.shape() {
        return Err(Error::shape("irfft", re.shape(), im.shape()));
    }
    let m = *re.shape().last().unwrap();
    if m > spectrum_len(n) {
        return Err(Error::invalid(format!(
            "irfft: {m} modes exceed spectrum length {} for n = {n}",
            spectrum_len(n)
        )));
    }
    let rows = re.len() / m;
    let mut buf = vec![Complex::new(S::zero(), S::zero()); rows * n];
    for r in 0..rows {
        let row = &mut buf[r * n..(r + 1) * n];
        for k in 0..m {
            let z = Complex::new(re.data()[r * m + k], im.data()[r * m + k]);
            if k == 0 {
                row[0] = Complex::new(z.re, S::zero());
            } else if 2 * k == n {
                row[k] = Complex::new(z.re, S::zero());
            } else {
                row[k] = z;
                row[n - k] = z.conj();
            }
        }
    }
    plan::<S>(n, true).process(&mut buf);
    let inv_n = S::one() / S::from_usize(n).unwrap();
    let mut shape = re.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, buf.iter().map(|z| z.re * inv_n).collect()))
}

/// Adjoint of the real part of `rfft` (and, with `imag = true`, of the
/// imaginary part) for spectral gradients `g` of trailing extent `m`.
pub(crate) fn rfft_adjoint<S: Scalar>(g: &Tensor<S>, n: usize, imag: bool) -> Tensor<S> {
    let m = *g.shape().last().unwrap();
    let rows = g.len() / m;
    let mut buf = vec![Complex::new(S::zero(), S::zero()); rows * n];
    for r in 0..rows {
        for k in 0..m {
            let gk = g.data()[r * m + k];
            // d/dx of sum_k g_k Re(X_k) is Re(sum_k g_k e^{+i theta});
            // for Im(X_k) the weight is i g_k.
            buf[r * n + k] = if imag {
                Complex::new(S::zero(), gk)
            } else {
                Complex::new(gk, S::zero())
            };
        }
    }
    plan::<S>(n, true).process(&mut buf);
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::from_parts(shape, buf.iter().map(|z| z.re).collect())
}

/// Adjoint of `irfft` for output gradient `g` (rows of length `n`) onto
/// `m` retained modes: returns gradients for the real and imaginary planes.
pub(crate) fn irfft_adjoint<S: Scalar>(g: &Tensor<S>, m: usize) -> (Tensor<S>, Tensor<S>) {
    let n = *g.shape().last().unwrap();
    let (gr, gi) = rfft(g).expect("n >= 2 checked on forward");
    let full = spectrum_len(n);
    let rows = g.len() / n;
    let inv_n = S::one() / S::from_usize(n).unwrap();
    let two = S::lit(2.0);
    let mut re = Vec::with_capacity(rows * m);
    let mut im = Vec::with_capacity(rows * m);
    for r in 0..rows {
        for k in 0..m {
            let c = if k == 0 || 2 * k == n { S::one() } else { two };
            re.push(c * inv_n * gr.data()[r * full + k]);
            let gimag = if k == 0 || 2 * k == n {
                S::zero()
            } else {
                c * inv_n * gi.data()[r * full + k]
            };
            im.push(gimag);
        }
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    (Tensor::from_parts(shape.clone(), re), Tensor::from_parts(shape, im))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_signal_has_only_dc() {
        let u = Tensor::<f64>::from_f64(&[4], &[1.0; 4]).unwrap();
        let (re, im) = rfft(&u).unwrap();
        assert_eq!(re.shape(), &[3]);
        assert!((re.data()[0] - 4.0).abs() < 1e-12);
        for k in 1..3 {
            assert!(re.data()[k].abs() < 1e-12 && im.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn pure_tone_lands_in_one_mode() {
        let n = 8;
        let vals: Vec<f64> = (0..n)
            .map(|j| (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos())
            .collect();
        let (re, im) = rfft(&Tensor::<f64>::from_f64(&[n], &vals).unwrap()).unwrap();
        for k in 0..spectrum_len(n) {
            let mag = (re.data()[k].powi(2) + im.data()[k].powi(2)).sqrt();
            if k == 1 {
                assert!((mag - 4.0).abs() < 1e-12);
            } else {
                assert!(mag < 1e-12, "mode {k} has {mag}");
            }
        }
    }

    #[test]
    fn roundtrip_odd_and_even() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 7, 64, 100] {
            let vals: Vec<f64> = (0..3 * n).map(|_| rng.random::<f64>()).collect();
            let u = Tensor::<f64>::from_f64(&[3, n], &vals).unwrap();
            let (re, im) = rfft(&u).unwrap();
            let back = irfft(&re, &im, n).unwrap();
            assert!(back.max_abs_diff(&u).unwrap() < 1e-10, "n = {n}");
        }
    }

    #[test]
    fn short_input_rejected() {
        let u = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        assert!(rfft(&u).is_err());
        let s = Tensor::<f64>::zeros(&[3]);
        assert!(irfft(&s, &s, 3).is_err());
    }

    #[test]
    fn single_precision_roundtrip() {
        let u = Tensor::<f32>::from_fn(&[16], |i| (i as f32 * 0.3).sin());
        let (re, im) = rfft(&u).unwrap();
        let back = irfft(&re, &im, 16).unwrap();
        assert!(back.max_abs_diff(&u).unwrap() < 1e-5);
    }
}
