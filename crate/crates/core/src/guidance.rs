//! Operator-guided velocity correction.

use serde::{Deserialize, Serialize};

use crate::diffmath::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub alpha_max: f64,
    pub gamma_sharp: f64,
    pub t_threshold: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha_max: 0.1,
            gamma_sharp: 10.0,
            t_threshold: 0.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= 0.0) || !(self.gamma_sharp > 0.0) || !(0.0..=1.0).contains(&self.t_threshold) {
            return Err(Error::Config(format!(
                "guidance needs alpha_max >= 0, gamma_sharp > 0, t_threshold in [0, 1]; got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn disabled() -> Self {
        Self {
            alpha_max: 0.0,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.alpha_max > 0.0
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `alpha_max * sigmoid(gamma_sharp * (t - t_threshold))`.
pub fn alpha(t: f64, cfg: &GuidanceConfig) -> f64 {
    cfg.alpha_max * logistic(cfg.gamma_sharp * (t - cfg.t_threshold))
}

/// Closed-form gradient `2 alpha(t) (x_t - x_fno)` with `x_fno` held fixed.
pub fn guidance_term<S: Scalar>(x_t: &Tensor<S>, x_fno: &Tensor<S>, t: f64, cfg: &GuidanceConfig) -> Result<Tensor<S>> {
    let k = S::lit(2.0 * alpha(t, cfg));
    x_t.zip_map(x_fno, "guidance_term", |a, b| k * (a - b))
}

/// Row-wise variant for a batch whose rows sit at different flow times.
pub fn guidance_term_rows<S: Scalar>(
    x_t: &Tensor<S>,
    x_fno: &Tensor<S>,
    t: &[f64],
    cfg: &GuidanceConfig,
) -> Result<Tensor<S>> {
    if x_t.shape() != x_fno.shape() {
        return Err(Error::shape("guidance_term", x_t.shape(), x_fno.shape()));
    }
    if t.len() != x_t.shape()[0] {
        return Err(Error::shape("guidance_term", x_t.shape(), &[t.len()]));
    }
    let row = x_t.len() / t.len();
    let ks: Vec<S> = t.iter().map(|&ti| S::lit(2.0 * alpha(ti, cfg))).collect();
    Ok(Tensor::from_fn(x_t.shape(), |i| ks[i / row] * (x_t.data()[i] - x_fno.data()[i])))
}

/// `v_cfm - g`.
pub fn guided_velocity<S: Scalar>(v_cfm: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    v_cfm.zip_map(g, "guided_velocity", |a, b| a - b)
}

/// Mean squared mismatch between the operator prediction and the flow's estimate.
pub fn guidance_loss<'t, S: Scalar>(fno_pred: &Var<'t, S>, target: &Var<'t, S>) -> Result<Var<'t, S>> {
    fno_pred.mse(target)
}
