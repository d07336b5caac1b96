//! SGD with momentum and decoupled-from-nothing weight decay (the classic
//! `g + wd * theta` form used by detection training recipes).

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::params::ParamStore;

pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// One update: `v <- mu * v + (g + wd * theta)`, `theta <- theta - lr * v`.
    /// Parameters without a gradient this step are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f64>>,
        lr: f64,
    ) {
        for (name, grad) in grads {
            let theta = params.get_mut(name);
            let effective = grad + &theta.mapv(|t| t * self.weight_decay);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            *v = v.mapv(|x| x * self.momentum) + &effective;
            *theta -= &v.mapv(|x| x * lr);
        }
    }
}
