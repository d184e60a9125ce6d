//! Training objectives: least-squares GAN, perceptual feature matching,
//! L1 reconstruction, and the weighted generator total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::classifier_features;
use crate::nn::ModelGraph;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the generator objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    /// Optional classifier cross-entropy on generated cells; 0 disables it.
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_l1: 10.0,
            lambda_perc: 1.0,
            lambda_cls: 0.0,
        }
    }
}

impl LossWeights {
    pub fn l1_only() -> Self {
        Self {
            lambda_adv: 0.0,
            lambda_l1: 1.0,
            lambda_perc: 0.0,
            lambda_cls: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_adv,
            self.lambda_l1,
            self.lambda_perc,
            self.lambda_cls,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn filled<S: Scalar>(tape: &mut Tape<S>, like: Var, value: f64) -> Var {
    let shape = tape.shape(like).to_vec();
    tape.constant(Tensor::full(shape, S::from_f64_lossy(value)))
}

/// `0.5 * mean((d_real - 1)^2) + 0.5 * mean(d_fake^2)`.
pub fn lsgan_d_loss<S: Scalar>(tape: &mut Tape<S>, d_real: Var, d_fake: Var) -> Result<Var> {
    if tape.shape(d_real) != tape.shape(d_fake) {
        return Err(Error::Shape {
            op: "lsgan_d_loss",
            detail: format!("{:?} vs {:?}", tape.shape(d_real), tape.shape(d_fake)),
        });
    }
    let ones = filled(tape, d_real, 1.0);
    let zeros = filled(tape, d_fake, 0.0);
    let real = tape.mse_loss(d_real, ones)?;
    let fake = tape.mse_loss(d_fake, zeros)?;
    let sum = tape.add(real, fake)?;
    Ok(tape.scale(sum, S::from_f64_lossy(0.5)))
}

/// `0.5 * mean((d_fake - 1)^2)`.
pub fn lsgan_g_loss<S: Scalar>(tape: &mut Tape<S>, d_fake: Var) -> Result<Var> {
    let ones = filled(tape, d_fake, 1.0);
    let l = tape.mse_loss(d_fake, ones)?;
    Ok(tape.scale(l, S::from_f64_lossy(0.5)))
}

/// Mean squared distance between frozen-classifier features of two stacks
/// of `[K,1,28,28]` cells.
pub fn perceptual_loss<S: Scalar>(
    tape: &mut Tape<S>,
    classifier: &ModelGraph<S>,
    generated_cells: Var,
    target_cells: Var,
) -> Result<Var> {
    if !classifier.is_frozen() {
        return Err(Error::Frozen(
            "perceptual loss requires a frozen classifier".into(),
        ));
    }
    let a = classifier_features(classifier, tape, generated_cells)?;
    let b = classifier_features(classifier, tape, target_cells)?;
    tape.mse_loss(a, b)
}

/// `lambda_adv * adv + lambda_l1 * l1 + lambda_perc * perc`.
pub fn generator_total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    weights: &LossWeights,
    l1: Var,
    perc: Var,
    adv: Var,
) -> Result<Var> {
    let a = tape.scale(adv, S::from_f64_lossy(weights.lambda_adv));
    let b = tape.scale(l1, S::from_f64_lossy(weights.lambda_l1));
    let c = tape.scale(perc, S::from_f64_lossy(weights.lambda_perc));
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_classifier;

    fn d_loss(real: f64, fake: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::full([2, 1, 3, 14], real));
        let f = tape.constant(Tensor::full([2, 1, 3, 14], fake));
        let l = lsgan_d_loss(&mut tape, r, f).unwrap();
        tape.value(l).item()
    }

    fn g_loss(fake: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::full([2, 1, 3, 14], fake));
        let l = lsgan_g_loss(&mut tape, f).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn lsgan_discriminator_values() {
        assert_eq!(d_loss(1.0, 0.0), 0.0);
        assert_eq!(d_loss(0.0, 1.0), 1.0);
        assert_eq!(d_loss(0.5, 0.5), 0.25);
    }

    #[test]
    fn lsgan_generator_values() {
        assert_eq!(g_loss(1.0), 0.0);
        assert_eq!(g_loss(0.0), 0.5);
        assert_eq!(g_loss(0.5), 0.125);
    }

    fn total(w: LossWeights, l1: f64, perc: f64, adv: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let [a, b, c] = [l1, perc, adv].map(|v| tape.constant(Tensor::scalar(v)));
        let t = generator_total_loss(&mut tape, &w, a, b, c).unwrap();
        tape.value(t).item()
    }

    #[test]
    fn total_loss_combination() {
        let w = |adv, l1, perc| LossWeights {
            lambda_adv: adv,
            lambda_l1: l1,
            lambda_perc: perc,
            lambda_cls: 0.0,
        };
        assert_eq!(total(w(0.0, 1.0, 0.0), 0.7, 0.0, 0.0), 0.7);
        assert!((total(w(1.0, 10.0, 1.0), 0.05, 0.2, 0.125) - 0.825).abs() < 1e-12);
        assert_eq!(total(w(1.0, 10.0, 1.0), 0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            lambda_adv: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let zero = LossWeights {
            lambda_adv: 0.0,
            lambda_l1: 0.0,
            lambda_perc: 0.0,
            lambda_cls: 0.0,
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn perceptual_requires_frozen_classifier() {
        let cls = build_classifier::<f32>(0).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([1, 1, 28, 28]));
        assert!(matches!(
            perceptual_loss(&mut tape, &cls, a, a),
            Err(Error::Frozen(_))
        ));
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let mut cls = build_classifier::<f64>(3).unwrap();
        cls.freeze();
        let mut rng = crate::rng::named_stream(0, "cells");
        let x = Tensor::uniform([2, 1, 28, 28], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform([2, 1, 28, 28], -1.0, 1.0, &mut rng);
        let eval = |p: &Tensor<f64>, q: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(p.clone()), tape.constant(q.clone()));
            let l = perceptual_loss(&mut tape, &cls, a, b).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(&x, &x), 0.0);
        assert_eq!(eval(&x, &y), eval(&y, &x));
        assert!(eval(&x, &y) > 0.0);
    }

    #[test]
    fn perceptual_gradient_never_reaches_classifier() {
        let mut cls = build_classifier::<f32>(3).unwrap();
        cls.freeze();
        let mut tape = Tape::new();
        let mut rng = crate::rng::named_stream(1, "cells");
        let g = tape.leaf(Tensor::uniform([2, 1, 28, 28], -1.0, 1.0, &mut rng), true);
        let t = tape.constant(Tensor::uniform([2, 1, 28, 28], -1.0, 1.0, &mut rng));
        let l = perceptual_loss(&mut tape, &cls, g, t).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.wrt(g).unwrap().max_abs() > 0.0);
        assert_eq!(grads.param_names().count(), 0);
        for name in cls.trainable_names() {
            assert!(grads.param(name).is_none());
        }
    }
}
