//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment buffers and step counter for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    pub config: AdamConfig,
}

impl<T: Element> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { m: vec![T::ZERO; len], v: vec![T::ZERO; len], t: 0, config }
    }

    pub fn for_param(param: &Tensor<T>, config: AdamConfig) -> Self {
        Self::new(param.numel(), config)
    }

    /// Number of applied steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }
}

/// Applies one Adam update to `param` in place.
///
/// A non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Element>(param: &mut Tensor<T>, grad: &[T], state: &mut AdamState<T>) -> Result<()> {
    let n = param.numel();
    if grad.len() != n || state.m.len() != n {
        return Err(dim_err!(
            "adam_step: parameter has {} values, gradient {}, state {}",
            n,
            grad.len(),
            state.m.len()
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            iteration: state.t + 1,
            message: format!("non-finite gradient {} at element {} of {}", grad[i], i, n),
        });
    }
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        let g = g.to_f64();
        let m_new = beta1 * m.to_f64() + (1.0 - beta1) * g;
        let v_new = beta2 * v.to_f64() + (1.0 - beta2) * g * g;
        *m = T::from_f64(m_new);
        *v = T::from_f64(v_new);
        let m_hat = m_new / bc1;
        let v_hat = v_new / bc2;
        *p = T::from_f64(p.to_f64() - learning_rate * m_hat / (v_hat.sqrt() + epsilon));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::new([1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::<f64>::from_fn([5], |i| i as f64 - 2.0).unwrap();
        let before = p.clone();
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &[0.0; 5], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0);
        let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
        let mut st = AdamState::for_param(&p, cfg);
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        // m_hat = v_hat = 1, step = lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn quadratic_converges_like_reference() {
        // independent scalar Adam written out longhand
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
        for t in 1..=100 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        }

        let mut p = scalar_param(1.0);
        let mut st = AdamState::for_param(&p, AdamConfig { learning_rate: 0.1, ..Default::default() });
        for _ in 0..100 {
            let g = 2.0 * p.data()[0];
            adam_step(&mut p, &[g], &mut st).unwrap();
        }
        assert!(p.data()[0].abs() < 0.1, "w = {}", p.data()[0]);
        assert!((p.data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        let err = adam_step(&mut p, &[f64::NAN], &mut st).unwrap_err();
        match err {
            Error::Training { iteration, message } => {
                assert_eq!(iteration, 1);
                assert!(message.contains("element 0"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn length_mismatch() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &[1.0, 2.0], &mut st), Err(Error::Dimension(_))));
    }
}
