use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Defaults for adversarial training (lower first-moment decay).
    pub fn gan() -> Self {
        Self {
            beta1: 0.5,
            ..Self::default()
        }
    }
}

/// Moment estimates for a fixed, ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            config,
            m,
            v,
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&[f64]],
        names: &[String],
    ) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == params.len(),
            Dimension,
            "adam tracks {} parameters, got {} params and {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or("?", String::as_str);
            ensure!(
                p.len() == g.len() && p.shape() == self.m[i].shape(),
                Dimension,
                "adam: parameter {name} shape mismatch"
            );
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {name} (index {i}) is {} at element {j}",
                    g[j]
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
