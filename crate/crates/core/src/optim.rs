//! Gradient-descent optimizers over a [`ParamSet`].

use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use std::collections::BTreeMap;

/// Plain stochastic gradient descent: w ← w − lr·g.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&self, params: &mut ParamSet) -> Result<()> {
        for (_, p) in params.iter_mut() {
            for (w, &g) in p.value.data_mut().iter_mut().zip(&p.grad) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction (Kingma & Ba defaults).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let st = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; p.grad.len()], v: vec![0.0; p.grad.len()] });
            if st.m.len() != p.grad.len() {
                return Err(Error::InvalidConfig(format!(
                    "adam state for {name:?} has len {}, gradient has len {}",
                    st.m.len(),
                    p.grad.len()
                )));
            }
            for i in 0..p.grad.len() {
                let g = p.grad[i];
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                p.value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.value.check_finite("adam step")?;
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        params.scale_grads(max_norm / norm);
    }
    norm
}
