//! Dense arrays, a reverse-mode tape and real FFTs.

pub mod fft;
pub mod tape;
pub mod tensor;

pub use fft::{irfft, rfft, spectrum_len};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;
use crate::scalar::Scalar;

/// Complex product `(ar + i ai)(br + i bi)` on split planes.
pub fn cmul<'t, S: Scalar>(
    ar: &Var<'t, S>,
    ai: &Var<'t, S>,
    br: &Var<'t, S>,
    bi: &Var<'t, S>,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let re = ar.mul(br)?.sub(&ai.mul(bi)?)?;
    let im = ar.mul(bi)?.add(&ai.mul(br)?)?;
    Ok((re, im))
}
