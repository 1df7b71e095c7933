use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moments are kept per parameter in the
/// same order as the owning [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[f64] {
        &self.first[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[f64] {
        &self.second[id.index()]
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`;
    /// parameters without a gradient are left untouched. If any gradient is
    /// non-finite nothing is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) -> Result<()> {
        for (id, name, value) in params.iter() {
            if let Some(g) = grads.get(id.index()).copied().flatten() {
                if g.shape() != value.shape() {
                    return Err(TensorError::ShapeMismatch {
                        op: "adam",
                        left: value.shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(TensorError::NonFiniteGradient(name.to_owned()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id.index()).copied().flatten() else {
                continue;
            };
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
