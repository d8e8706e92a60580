use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates for every parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self { step: 0, m: zeros(), v: zeros(), config }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
///
/// `grads[i] == None` means the parameter received no gradient; its moments
/// still decay and weight decay still applies.
pub fn adamw_step(params: &mut [Tensor], grads: &[Option<&[f64]>], state: &mut AdamWState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(NnError::Shape(format!(
            "adamw: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(NnError::Shape(format!("adamw: moment {i} shape differs from parameter")));
        }
        if g.is_some_and(|g| g.len() != p.numel()) {
            return Err(NnError::Shape(format!("adamw: gradient {i} length differs from parameter")));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = grads[i].map_or(0.0, |g| g[j]);
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= c.lr * c.weight_decay * data[j];
            data[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// AdamW driven by the gradients accumulated in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        Self { state: AdamWState::new(store.tensors(), config) }
    }

    /// Applies one update from the stored gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        let grads: Vec<Option<Vec<f64>>> = store.tensors().iter().map(|t| t.grad().map(<[f64]>::to_vec)).collect();
        let views: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        adamw_step(store.tensors_mut(), &views, &mut self.state)?;
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = vec![Tensor::vector(vec![0.5, -2.0])];
        let before = params.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut state = AdamWState::new(&params, cfg);
        let g = [0.0, 0.0];
        for _ in 0..3 {
            adamw_step(&mut params, &[Some(&g)], &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        let mut params = vec![Tensor::vector(vec![1.0])];
        let cfg = AdamWConfig { lr: 1e-3, ..Default::default() };
        let mut state = AdamWState::new(&params, cfg);
        adamw_step(&mut params, &[Some(&[1.0])], &mut state).unwrap();
        // m_hat = 1, v_hat = 1: 1 - 1e-3 * 0.01 * 1 - 1e-3 / (1 + 1e-8)
        let expected = 1.0 - 1e-5 - 1e-3 / (1.0 + 1e-8);
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
        assert!((params[0].data()[0] - 0.998_990_000_01).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut state = AdamWState::new(&params, AdamWConfig::default());
        assert!(adamw_step(&mut params, &[Some(&[1.0])], &mut state).is_err());
        assert!(adamw_step(&mut params, &[], &mut state).is_err());
    }

    #[test]
    fn trajectories_are_deterministic() {
        let run = || {
            let mut params = vec![Tensor::vector(vec![0.3, -0.7, 1.1])];
            let mut state = AdamWState::new(&params, AdamWConfig { lr: 1e-2, ..Default::default() });
            let mut trace = Vec::new();
            for k in 0..50 {
                let g: Vec<f64> = params[0].data().iter().map(|x| 2.0 * x + (k as f64).sin()).collect();
                adamw_step(&mut params, &[Some(&g)], &mut state).unwrap();
                trace.extend(params[0].data().iter().map(|x| x.to_bits()));
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
