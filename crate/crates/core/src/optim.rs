//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let states = store
            .params()
            .iter()
            .map(|p| AdamState {
                m: vec![0.0; p.value.numel()],
                v: vec![0.0; p.value.numel()],
            })
            .collect();
        Self {
            config,
            step: 0,
            states,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    /// Applies one update to every trainable parameter using its stored gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.states.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.states.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (p, st) in store.params_mut().iter_mut().zip(&mut self.states) {
            if !p.trainable {
                continue;
            }
            if st.m.len() != p.value.numel() {
                return Err(Error::shape("adam_step", &[st.m.len()], p.value.shape()));
            }
            update(p.value.data_mut(), p.grad.data(), st, lr, beta1, beta2, eps, bc1, bc2);
        }
        Ok(())
    }
}

/// Standalone Adam update of one tensor; `step` is the post-increment step count.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, config: &AdamConfig, step: u64) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    update(
        param.data_mut(),
        grad.data(),
        state,
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
        bc1,
        bc2,
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut [f64], g: &[f64], st: &mut AdamState, lr: f64, b1: f64, b2: f64, eps: f64, bc1: f64, bc2: f64) {
    for i in 0..p.len() {
        st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
        st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = st.m[i] / bc1;
        let v_hat = st.v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 at step 1, so the update is lr / (1 + eps).
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = AdamState { m: vec![0.0], v: vec![0.0] };
        adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = AdamState { m: vec![0.0], v: vec![0.0] };
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = 0.0f64;
        let mut prev = 0.0;
        for t in 1..=100u64 {
            adam_step(&mut p, &g, &mut st, &cfg, t).unwrap();
            // formula evaluated independently
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            reference -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!(p.data()[0] < prev);
            assert!((p.data()[0] - reference).abs() < 1e-15);
            prev = p.data()[0];
        }
        assert!(st.v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let g = Tensor::vector(vec![1.0]);
        let mut st = AdamState { m: vec![0.0; 2], v: vec![0.0; 2] };
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default(), 1).is_err());
    }
}
