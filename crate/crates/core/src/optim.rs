//! Adam with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{Result, SimsidError};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A trainable tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    first_moment: Tensor,
    second_moment: Tensor,
    step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&Tensor, &Tensor) {
        (&self.first_moment, &self.second_moment)
    }

    /// Restore optimizer state, e.g. from a checkpoint.
    pub fn set_state(&mut self, m: Tensor, v: Tensor, step: u64) -> Result<()> {
        if m.shape() != self.value.shape() || v.shape() != self.value.shape() {
            return Err(SimsidError::shape(
                "parameter state",
                format!("{} expects {:?}", self.name, self.value.shape()),
            ));
        }
        self.first_moment = m;
        self.second_moment = v;
        self.step = step;
        Ok(())
    }
}

/// One Adam update. Weight decay is decoupled: applied to the value before
/// the moment update. Consumes and clears the gradient buffer.
pub fn adam_step(p: &mut Parameter, lr: f64, weight_decay: f64) -> Result<()> {
    let grad = p
        .grad
        .take()
        .ok_or_else(|| SimsidError::arg("adam_step", format!("parameter {} has no gradient", p.name)))?;
    if grad.shape() != p.value.shape() {
        return Err(SimsidError::shape(
            "adam_step",
            format!("{}: grad {:?} vs value {:?}", p.name, grad.shape(), p.value.shape()),
        ));
    }
    if weight_decay != 0.0 {
        let f = 1.0 - lr * weight_decay;
        for v in p.value.data_mut() {
            *v *= f;
        }
    }
    p.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(p.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(p.step as i32);
    let m = p.first_moment.data_mut();
    let v = p.second_moment.data_mut();
    let w = p.value.data_mut();
    for ((w_i, g_i), (m_i, v_i)) in w.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut())) {
        *m_i = ADAM_BETA1 * *m_i + (1.0 - ADAM_BETA1) * g_i;
        *v_i = ADAM_BETA2 * *v_i + (1.0 - ADAM_BETA2) * g_i * g_i;
        let m_hat = *m_i / bc1;
        let v_hat = *v_i / bc2;
        *w_i -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    p.value.assert_finite(&format!("parameter {} after adam_step", p.name))?;
    Ok(())
}

/// Cosine annealing between `lr_max` (epoch 0) and `lr_min` (epoch `total`).
/// Epochs past `total` clamp to `lr_min`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || epoch >= total {
        return lr_min;
    }
    let t = epoch as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent Adam oracle: the textbook update evaluated step by step.
    fn adam_oracle(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            p *= 1.0 - lr * wd;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let t1 = (t + 1) as i32;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t1));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t1));
            p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut p = Parameter::new("p", Tensor::scalar(1.5));
        p.grad = Some(Tensor::scalar(0.0));
        adam_step(&mut p, 0.1, 0.0).unwrap();
        assert_eq!(p.value.scalar_value(), 1.5);
        assert_eq!(p.step_count(), 1);
        assert!(p.grad.is_none(), "grad buffer must be cleared");
    }

    #[test]
    fn single_step_matches_oracle() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0));
        p.grad = Some(Tensor::scalar(1.0));
        adam_step(&mut p, 0.1, 0.0).unwrap();
        let expect = adam_oracle(1.0, &[1.0], 0.1, 0.0);
        assert!((p.value.scalar_value() - expect).abs() < 1e-15);
        // first step with unit gradient moves by ~lr
        assert!((p.value.scalar_value() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn two_steps_identical_grads_match_oracle() {
        let mut p = Parameter::new("p", Tensor::scalar(0.3));
        for _ in 0..2 {
            p.grad = Some(Tensor::scalar(0.7));
            adam_step(&mut p, 0.05, 0.0).unwrap();
        }
        assert_eq!(p.step_count(), 2);
        let expect = adam_oracle(0.3, &[0.7, 0.7], 0.05, 0.0);
        assert!((p.value.scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_applies_before_moments() {
        let mut p = Parameter::new("p", Tensor::scalar(2.0));
        p.grad = Some(Tensor::scalar(0.0));
        adam_step(&mut p, 0.1, 0.5).unwrap();
        assert!((p.value.scalar_value() - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = Parameter::new("p", Tensor::scalar(1.0));
        assert!(adam_step(&mut p, 0.1, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 200, 1e-4, 2e-5), 1e-4);
        assert!((cosine_lr(200, 200, 1e-4, 2e-5) - 2e-5).abs() < 1e-20);
        // midpoint: lr_min + (lr_max - lr_min)/2 = 6e-5
        assert!((cosine_lr(100, 200, 1e-4, 2e-5) - 6e-5).abs() < 1e-18);
        // past the horizon clamps to lr_min
        assert_eq!(cosine_lr(500, 200, 1e-4, 2e-5), 2e-5);
    }
}
