use serde::{Deserialize, Serialize};

use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter, plus the
/// step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Parameters and moments are kept at single precision so that a saved
/// checkpoint resumes bit-identically.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.data_mut();
        let (ms, vs) = (m.data_mut(), v.data_mut());
        for (i, &g) in p.grad.data().iter().enumerate() {
            ms[i] = (cfg.beta1 * ms[i] + (1.0 - cfg.beta1) * g) as f32 as f64;
            vs[i] = (cfg.beta2 * vs[i] + (1.0 - cfg.beta2) * g * g) as f32 as f64;
            let m_hat = ms[i] / c1;
            let v_hat = vs[i] / c2;
            values[i] = (values[i] - lr * m_hat / (v_hat.sqrt() + cfg.epsilon)) as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_param("p", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.params_mut()[0].grad = Tensor::new(vec![1], vec![g]).unwrap();
    }

    #[test]
    fn single_step_by_hand() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        set_grad(&mut s, 0.5);
        adam_step(&mut s, &mut st, 0.1, &AdamConfig::default());
        // m = 0.05, v = 0.00025; bias-corrected 0.5 and 0.25
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((s.params()[0].value.item() - expected).abs() < 1e-7);
        assert!((st.m[0].item() / 0.05 - 1.0).abs() < 1e-7);
        assert!((st.v[0].item() / 0.000_25 - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_and_zero_rate_leave_params_alone() {
        let mut s = scalar_store(0.75);
        let mut st = AdamState::new(&s);
        set_grad(&mut s, 0.0);
        adam_step(&mut s, &mut st, 0.1, &AdamConfig::default());
        assert_eq!(s.params()[0].value.item(), 0.75);
        set_grad(&mut s, 3.0);
        adam_step(&mut s, &mut st, 0.0, &AdamConfig::default());
        assert_eq!(s.params()[0].value.item(), 0.75);
    }

    #[test]
    fn constant_gradient_moves_lr_per_step() {
        // with a constant gradient both corrected moments are exact, so
        // every step is lr * g / (|g| + eps)
        let (lr, g, k) = (0.01, -2.0, 50);
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        for _ in 0..k {
            set_grad(&mut s, g);
            adam_step(&mut s, &mut st, lr, &AdamConfig::default());
        }
        let expected = -(g as f64).signum() * lr * k as f64 * (2.0 / (2.0 + 1e-8));
        assert!((s.params()[0].value.item() - expected).abs() < 1e-5);
    }
}
