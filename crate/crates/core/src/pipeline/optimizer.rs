//! Adam with decoupled weight decay, global-norm gradient clipping and a
//! cosine learning-rate schedule.

use crate::autodiff::Parameter;
use crate::error::Result;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub struct AdamW {
    weight_decay: f64,
    grad_clip: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Decay applies to weight matrices only, not biases or tokens.
    decayed: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &[Parameter], weight_decay: f64, grad_clip: f64) -> AdamW {
        AdamW {
            weight_decay,
            grad_clip,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            decayed: params.iter().map(|p| p.name.ends_with(".weight")).collect(),
        }
    }

    /// Drops the moment estimates (the stage-boundary reset option).
    pub fn reset_state(&mut self) {
        self.t = 0;
        for m in self.m.iter_mut() {
            m.fill(0.0);
        }
        for v in self.v.iter_mut() {
            v.fill(0.0);
        }
    }

    /// Applies one update from the parameters' accumulated gradients.
    pub fn step(&mut self, params: &[Parameter], lr: f64) -> Result<()> {
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.tensor.grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]))
            .collect();

        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.grad_clip && norm > 0.0 {
            self.grad_clip / norm
        } else {
            1.0
        };

        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);

        for (i, p) in params.iter().enumerate() {
            let mut values = p.tensor.value();
            for (j, value) in values.iter_mut().enumerate() {
                let g = grads[i][j] * clip;
                self.m[i][j] = BETA1 * self.m[i][j] + (1.0 - BETA1) * g;
                self.v[i][j] = BETA2 * self.v[i][j] + (1.0 - BETA2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                let mut update = m_hat / (v_hat.sqrt() + ADAM_EPS);
                if self.decayed[i] {
                    update += self.weight_decay * *value;
                }
                *value -= lr * update;
            }
            p.tensor.set_data(&values)?;
        }
        Ok(())
    }
}

/// Peak at step 0, cosine-decayed to 0 at the final step.
pub fn cosine_lr(peak: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return peak;
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
