use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Optional cap on optimizer steps, applied on top of `epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
}

impl Default for SgdHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0001,
            epochs: 100,
            iterations: None,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.iterations == Some(0) {
            return Err(Error::config("iterations must be positive when set"));
        }
        Ok(())
    }
}

/// One velocity buffer per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<F: Element = f32> {
    velocity: Vec<Vec<F>>,
}

impl<F: Element> SgdState<F> {
    pub fn for_params(params: &[Tensor<F>]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![F::zero(); p.len()]).collect(),
        }
    }

    pub fn velocity(&self, index: usize) -> Option<&[F]> {
        self.velocity.get(index).map(Vec::as_slice)
    }
}

/// Applies `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v` to every parameter.
pub fn sgd_step<F: Element>(
    params: &mut [Tensor<F>],
    grads: &[&Tensor<F>],
    state: &mut SgdState<F>,
    hyper: &SgdHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || v.len() != p.len() {
            return Err(Error::shape(format!(
                "sgd_step: parameter {i} has shape {:?}, gradient {:?}, velocity {}",
                p.shape(),
                g.shape(),
                v.len()
            )));
        }
    }
    let lr = F::of_f64(hyper.learning_rate);
    let mu = F::of_f64(hyper.momentum);
    let wd = F::of_f64(hyper.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let values = p.values_mut();
        for ((w, &gr), vel) in values.iter_mut().zip(g.data()).zip(v.iter_mut()) {
            let g_eff = gr + wd * *w;
            *vel = mu * *vel + g_eff;
            *w = *w - lr * *vel;
        }
    }
    Ok(())
}
