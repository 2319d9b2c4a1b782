//! AdamW with decoupled, multiplicative weight decay.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::numerics::Tensor;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Which tensors received weight decay on the last step.
    pub decayed: Vec<bool>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        let decayed = alloc::vec![false; m.len()];
        Self { step: 0, m, v, decayed }
    }
}

/// One AdamW update. `decay[i]` selects the tensors that receive weight
/// decay, applied as `p ← p·(1 − lr·wd)` before the moment step.
pub fn adamw_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut OptimizerState<T>,
    lr: f64,
    config: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        bail!(
            Dimension,
            "adamw: {} params, {} grads, {} moments, {} decay flags",
            params.len(),
            grads.len(),
            state.m.len(),
            decay.len()
        );
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            bail!(Dimension, "adamw: tensor {} has shape {:?}, gradient {:?}", i, p.shape(), g.shape());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
    let (b1, b2) = (T::from_f64(config.beta1), T::from_f64(config.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - config.beta1), T::from_f64(1.0 - config.beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(config.eps);
    let shrink = T::from_f64(1.0 - lr * config.weight_decay);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let apply_decay = decay[i] && config.weight_decay != 0.0;
        state.decayed[i] = apply_decay;
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if apply_decay {
                *p *= shrink;
            }
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}
