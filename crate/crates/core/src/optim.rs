//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// The GAN defaults: lr 2e-4, beta1 0.5, beta2 0.999.
    pub fn gan() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug)]
pub struct Moments<S: Scalar> {
    m: Tensor<S>,
    v: Tensor<S>,
}

impl<S: Scalar> Moments<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }

    /// One Adam update of `param` in place; `step` is the 1-based step count.
    pub fn update(&mut self, cfg: &AdamConfig, step: u64, param: &mut Tensor<S>, grad: &Tensor<S>) {
        assert_eq!(param.shape(), grad.shape(), "adam: gradient shape mismatch");
        let b1 = S::from_f64_lossy(cfg.beta1);
        let b2 = S::from_f64_lossy(cfg.beta2);
        let c1 = S::from_f64_lossy(1.0 - cfg.beta1.powi(step as i32));
        let c2 = S::from_f64_lossy(1.0 - cfg.beta2.powi(step as i32));
        let lr = S::from_f64_lossy(cfg.lr);
        let eps = S::from_f64_lossy(cfg.eps);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Adam state for every trainable parameter of one model.
#[derive(Clone, Debug)]
pub struct Adam<S: Scalar> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update to every trainable parameter of `model` that has a
    /// gradient in `grads`. A frozen model is rejected.
    pub fn step(&mut self, model: &mut ModelGraph<S>, grads: &Gradients<S>) -> Result<()> {
        if model.is_frozen() {
            return Err(Error::Frozen(format!(
                "refusing to update frozen {:?}",
                model.kind()
            )));
        }
        self.step += 1;
        let names: Vec<String> = model.trainable_names().map(str::to_string).collect();
        for name in names {
            let Some(grad) = grads.param(&name) else {
                continue;
            };
            let param = model.param_mut(&name).expect("trainable name");
            self.moments
                .entry(name)
                .or_insert_with(|| Moments::zeros(param.shape()))
                .update(&self.config, self.step, param, grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Tensor::<f64>::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut m = Moments::zeros(&[3]);
        for step in 1..=5 {
            m.update(&cfg, step, &mut p, &Tensor::zeros([3]));
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut p = Tensor::<f64>::scalar(0.0);
        Moments::zeros(&[1]).update(&cfg, 1, &mut p, &Tensor::scalar(1.0));
        // m_hat = 1, v_hat = 1 -> -0.1 / (1 + 1e-8)
        assert!((p.item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn descends_a_parabola() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut x = Tensor::<f64>::scalar(5.0);
        let mut m = Moments::zeros(&[1]);
        for step in 1..=100 {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let sq = tape.mul(v, v).unwrap();
            let g = tape.backward(sq).unwrap();
            let grad = g.wrt(v).unwrap().clone();
            m.update(&cfg, step, &mut x, &grad);
        }
        assert!(x.item().abs() < 1.0, "x = {}", x.item());
    }
}
