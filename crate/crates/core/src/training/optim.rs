//! AdamW, cosine annealing and the fast gradient sign perturbation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One AdamW update at step `t >= 1` with decoupled weight decay:
/// `w <- w (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(w: &mut Tensor, grad: &Tensor, state: &mut AdamState, t: u64, lr: f64, hp: &AdamHyper) -> Result<()> {
    if grad.shape() != w.shape() || state.m.shape() != w.shape() || state.v.shape() != w.shape() {
        return Err(TrainError::Shape(format!(
            "parameter {:?}, gradient {:?}, moments {:?}/{:?}",
            w.shape(),
            grad.shape(),
            state.m.shape(),
            state.v.shape()
        )));
    }
    if t == 0 {
        return Err(TrainError::Config("AdamW steps are counted from 1".into()));
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    let decay = 1.0 - lr * hp.weight_decay;
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((w, &g), m), v) in w.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let (mh, vh) = (*m / c1, *v / c2);
        *w = *w * decay - lr * mh / (vh.sqrt() + hp.eps);
    }
    Ok(())
}

/// AdamW over a [`ParamStore`]; moments are created on first use.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hp: AdamHyper,
    t: u64,
    states: Vec<Option<AdamState>>,
}

impl AdamW {
    pub fn new(hp: AdamHyper) -> Self {
        Self {
            hp,
            t: 0,
            states: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every trainable parameter that received a gradient. Parameters
    /// without one (inactive branches) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        for (id, g) in grads {
            if !store.entry(*id).trainable {
                continue;
            }
            let state = self.states[id.index()].get_or_insert_with(|| AdamState::zeros(g.shape()));
            adamw_step(store.get_mut(*id), g, state, self.t, lr, &self.hp)?;
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi t / t_max)) / 2`, clamped to
/// `lr_min` from `t_max` on.
pub fn cosine_lr(t: usize, t_max: usize, lr_max: f64, lr_min: f64) -> f64 {
    if t >= t_max {
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / t_max as f64).cos())
}

/// `clamp(x + eps sign(grad), 0, 1)` with `sign(0) = 0`.
pub fn fgsm_perturb(x: &Tensor, grad: &Tensor, eps: f64) -> Result<Tensor> {
    if x.shape() != grad.shape() {
        return Err(TrainError::Shape(format!("image {:?}, gradient {:?}", x.shape(), grad.shape())));
    }
    if !(eps > 0.0) {
        return Err(TrainError::Config(format!("fgsm epsilon {eps} must be positive")));
    }
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + eps * s).clamp(0.0, 1.0)
        })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}
