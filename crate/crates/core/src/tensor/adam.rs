use serde::{Deserialize, Serialize};

use super::{GradMap, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
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

/// Moment estimates for an ordered list of parameters.
///
/// Moments are matched to parameters by position, so the same parameter
/// order must be used on every step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.first_moment[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.second_moment[i]
    }

    /// One bias-corrected Adam update. Each parameter handle is replaced by a
    /// fresh leaf carrying the updated values; graphs built from the old
    /// handles are unaffected.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &GradMap, lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(super::invalid(
                "adam",
                format!("learning rate must be > 0, got {lr}"),
            ));
        }
        if params.len() != self.first_moment.len() {
            return Err(super::invalid(
                "adam",
                format!(
                    "state tracks {} parameters, got {}",
                    self.first_moment.len(),
                    params.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if !grads.contains(p) {
                return Err(TensorError::MissingGradient(i));
            }
            if p.len() != self.first_moment[i].len() {
                return Err(super::invalid(
                    "adam",
                    format!("parameter #{i} changed size"),
                ));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(p).expect("checked above");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            let mut data = p.data().to_vec();
            for (((x, &gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            **p = p.with_data(data)?;
        }
        Ok(())
    }
}
