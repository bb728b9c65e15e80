use super::tensor::{DiffTensor, ParamSet};
use crate::error::{Error, Result};

/// Global L2 norm over every populated gradient.
pub fn global_grad_norm<'a>(tensors: impl IntoIterator<Item = &'a DiffTensor>) -> f64 {
    tensors
        .into_iter()
        .map(DiffTensor::grad_norm_sq)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
///
/// Returns the factor that was applied (1.0 when the norm was already within
/// bounds).
pub fn clip_global_norm<'a>(
    tensors: impl IntoIterator<Item = &'a mut DiffTensor>,
    max_norm: f64,
) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut tensors: Vec<&mut DiffTensor> = tensors.into_iter().collect();
    let norm = global_grad_norm(tensors.iter().map(|t| &**t));
    if norm <= max_norm {
        return 1.0;
    }
    let factor = max_norm / norm;
    for t in tensors.iter_mut() {
        if let Some(g) = t.grad.as_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
    factor
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter first and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_config(params, AdamConfig::default())
    }

    pub fn with_config(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.value.len()])
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// Applies one update to every parameter of `params`. Each trainable
    /// parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            if p.requires_grad && p.grad.is_none() {
                return Err(Error::Usage(format!("parameter {name} has no gradient")));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
