//! Adam optimizer with per-tensor first/second moment state and the
//! per-epoch exponential learning-rate decay used by the training loops.

use crate::error::{CoreError, Result};
use sarcaps_tensor::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// One optimizer instance drives one fixed set of tensors, addressed by
/// the index they were registered with.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub params: AdamParams,
    slots: Vec<Slot<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: AdamParams, sizes: &[usize]) -> Self {
        let slots = sizes
            .iter()
            .map(|&n| Slot { m: vec![T::zero(); n], v: vec![T::zero(); n] })
            .collect();
        Adam { params, slots, t: 0 }
    }

    /// Advance the shared step counter; call once per optimizer step,
    /// before the per-tensor updates.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// In-place Adam update of one registered tensor. `lr` is passed per
    /// call so a schedule can vary it between epochs.
    pub fn update(&mut self, slot: usize, lr: f64, data: &mut [T], grad: &[T]) -> Result<()> {
        if self.t == 0 {
            return Err(CoreError::Train("Adam::update called before begin_step".into()));
        }
        let s = self
            .slots
            .get_mut(slot)
            .ok_or_else(|| CoreError::Train(format!("Adam slot {slot} not registered")))?;
        if s.m.len() != data.len() || data.len() != grad.len() {
            return Err(CoreError::Train(format!(
                "Adam slot {slot} sized {}, got data {} / grad {}",
                s.m.len(),
                data.len(),
                grad.len()
            )));
        }
        let b1 = T::from_f64x(self.params.beta1);
        let b2 = T::from_f64x(self.params.beta2);
        let one_m_b1 = T::one() - b1;
        let one_m_b2 = T::one() - b2;
        // bias corrections in f64 to keep long runs accurate
        let c1 = T::from_f64x(1.0 - self.params.beta1.powi(self.t as i32));
        let c2 = T::from_f64x(1.0 - self.params.beta2.powi(self.t as i32));
        let eps = T::from_f64x(self.params.eps);
        let lr_t = T::from_f64x(lr);
        for i in 0..data.len() {
            let g = grad[i];
            s.m[i] = b1 * s.m[i] + one_m_b1 * g;
            s.v[i] = b2 * s.v[i] + one_m_b2 * g * g;
            let m_hat = s.m[i] / c1;
            let v_hat = s.v[i] / c2;
            data[i] = data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// lr(epoch) = base · decay^epoch, epochs counted from zero.
pub fn lr_schedule(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr_against_the_gradient() {
        // with m_hat = g and v_hat = g^2, the first update is
        // lr·g/(|g|+eps) = lr·sign(g) up to eps
        let mut adam: Adam<f64> = Adam::new(AdamParams::default(), &[2]);
        let mut data = vec![1.0, -2.0];
        let grad = vec![3.0, -0.5];
        adam.begin_step();
        adam.update(0, 1e-3, &mut data, &grad).unwrap();
        assert!((data[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((data[1] - (-2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam: Adam<f64> = Adam::new(AdamParams::default(), &[3]);
        let mut data = vec![0.5, -0.25, 4.0];
        let before = data.clone();
        for _ in 0..5 {
            adam.begin_step();
            adam.update(0, 1e-2, &mut data, &[0.0, 0.0, 0.0]).unwrap();
        }
        assert_eq!(data, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn constant_gradient_descends_a_quadratic() {
        // minimize f(x) = (x-3)^2 with exact gradients
        let mut adam: Adam<f64> = Adam::new(AdamParams::default(), &[1]);
        let mut x = vec![0.0];
        for _ in 0..4000 {
            let g = 2.0 * (x[0] - 3.0);
            adam.begin_step();
            adam.update(0, 1e-2, &mut x, &[g]).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn update_requires_begin_step_and_matching_sizes() {
        let mut adam: Adam<f64> = Adam::new(AdamParams::default(), &[2]);
        let mut data = vec![0.0, 0.0];
        assert!(adam.update(0, 1e-3, &mut data, &[1.0, 1.0]).is_err());
        adam.begin_step();
        assert!(adam.update(0, 1e-3, &mut data, &[1.0]).is_err());
        assert!(adam.update(1, 1e-3, &mut data, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn schedule_decays_per_epoch() {
        assert_eq!(lr_schedule(1e-3, 0.9, 0), 1e-3);
        assert!((lr_schedule(1e-3, 0.9, 1) - 9e-4).abs() < 1e-12);
        assert!((lr_schedule(1e-3, 0.9, 10) - 1e-3 * 0.9f64.powi(10)).abs() < 1e-15);
        assert_eq!(lr_schedule(5e-4, 1.0, 7), 5e-4);
    }
}
