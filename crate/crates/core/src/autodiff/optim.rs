//! Trainable parameters and the Adam update.

use super::{AutodiffError, Result};

/// A named trainable tensor with its Adam moment accumulators.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    /// Gradient staged by the training loop; consumed by [`adam_step`].
    pub grad: Option<Vec<f32>>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        let n = data.len();
        debug_assert_eq!(shape.iter().product::<usize>(), n);
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Adam hyperparameters (bias-corrected variant).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam step over a parameter set. Every parameter must carry a staged
/// gradient; gradients are cleared after the update and `step_count`
/// advances even when `lr == 0`.
pub fn adam_step(params: &mut [&mut Parameter], cfg: AdamConfig) -> Result<()> {
    for p in params.iter() {
        if p.grad.is_none() {
            return Err(AutodiffError::MissingGradient { name: p.name.clone() });
        }
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as f64;
        let bias1 = 1.0 - (cfg.beta1 as f64).powi(t as i32) as f32;
        let bias2 = 1.0 - (cfg.beta2 as f64).powi(t as i32) as f32;
        for i in 0..p.data.len() {
            let g = grad[i];
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g;
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.adam_m[i] / bias1;
            let v_hat = p.adam_v[i] / bias2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
