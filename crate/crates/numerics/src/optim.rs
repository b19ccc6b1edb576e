//! Adam and AdamW with bias correction.

use crate::error::{NumericsError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimVariant {
    /// Weight decay folded into the gradient (L2 penalty).
    Adam,
    /// Weight decay applied directly to the parameters.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub variant: OptimVariant,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            variant: OptimVariant::Adam,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            variant: OptimVariant::AdamW,
            ..Self::adam(lr)
        }
    }
}

/// Moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: OptimState,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        Self {
            config,
            state: OptimState::for_store(store),
        }
    }

    /// Update every parameter that holds a gradient. Parameters without a
    /// gradient are left untouched along with their moments.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.state.first.len() != store.len() {
            return Err(NumericsError::Dimension {
                op: "optimizer_step",
                detail: format!(
                    "state tracks {} tensors, store has {}",
                    self.state.first.len(),
                    store.len()
                ),
            });
        }
        for (i, (id, _, t)) in store.iter().enumerate() {
            if self.state.first[i].len() != t.len() {
                return Err(NumericsError::Dimension {
                    op: "optimizer_step",
                    detail: format!("moment size mismatch for parameter {}", id.index()),
                });
            }
        }
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
            if !p.requires_grad() {
                continue;
            }
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let mut gj = grad[j];
                if c.variant == OptimVariant::Adam && c.weight_decay != 0.0 {
                    gj += c.weight_decay * data[j];
                }
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if c.variant == OptimVariant::AdamW {
                    data[j] -= c.lr * c.weight_decay * data[j];
                }
                data[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
