//! Adam optimizer with bias correction.

use super::{Parameter, Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. The defaults are the values used for every model in
/// this crate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            alpha: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter, plus the step
/// counter. Slots align positionally with the parameter list handed to
/// [`adam_step`]; the shapes are re-validated on every call.
#[derive(Debug, Clone)]
pub struct AdamState<R: Real> {
    pub t: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    /// Fresh zeroed state for a parameter list.
    pub fn new(params: &[&Parameter<R>]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Rebuilds state from persisted parts; slot count and shapes must
    /// pair up.
    pub fn from_parts(t: u64, m: Vec<Tensor<R>>, v: Vec<Tensor<R>>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Contract(format!(
                "{} first-moment slots vs {} second-moment slots",
                m.len(),
                v.len()
            )));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(Error::Contract(
                    "moment slot shapes do not pair up".into(),
                ));
            }
        }
        Ok(AdamState { t, m, v })
    }

    /// Read access to the moment slots, for persistence.
    pub fn moments(&self) -> (&[Tensor<R>], &[Tensor<R>]) {
        (&self.m, &self.v)
    }

    fn check(&self, params: &[&mut Parameter<R>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} slots but {} parameters were passed",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.value.shape() != self.m[i].shape() {
                return Err(Error::Contract(format!(
                    "optimizer slot {} shape {:?} does not match parameter {} shape {:?}",
                    i,
                    self.m[i].shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Apply one Adam update in place.
///
/// `m ← β₁m + (1-β₁)g`, `v ← β₂v + (1-β₂)g²`, then the bias-corrected update
/// `θ ← θ - α·m̂/(√v̂ + ε)`. Non-trainable parameters are skipped (their
/// moment slots stay zero). With default hyperparameters and unit gradient
/// the very first update moves a weight by `-α/(1+ε) ≈ -1.99999998e-4`.
pub fn adam_step<R: Real>(
    params: &mut [&mut Parameter<R>],
    state: &mut AdamState<R>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.check(params)?;
    state.t += 1;
    let t = state.t;
    let b1 = R::of(cfg.beta1);
    let b2 = R::of(cfg.beta2);
    let one = R::one();
    // Bias corrections evaluated in f64 for accuracy at large t.
    let c1 = R::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = R::of(1.0 - cfg.beta2.powi(t as i32));
    let alpha = R::of(cfg.alpha);
    let eps = R::of(cfg.eps);

    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let w = p.value.data_mut();
        let g = p.grad.data();
        for j in 0..w.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            w[j] = w[j] - alpha * mhat / (vhat.sqrt() + eps);
        }
        if !p.value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite weight in parameter {} after optimizer step {}",
                p.name, t
            )));
        }
    }
    Ok(())
}
