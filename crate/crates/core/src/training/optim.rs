use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::numerics::{Real, Tensor};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Whether a parameter is subject to weight decay: weight matrices only,
/// not biases, norms, positional tables or the class token.
fn decays(name: &str, shape: &[usize]) -> bool {
    shape.len() == 2 && !name.starts_with("pos.") && name != "cls_token"
}

/// Optimizer state for every leaf of a [`ModelParams`], in canonical order.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    decay: Vec<bool>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ModelParams<T>) -> Self {
        let named = params.named();
        let zeros = || named.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect::<Vec<_>>();
        Self {
            kind,
            decay: named.iter().map(|(n, t)| decays(n, t.shape())).collect(),
            first: zeros(),
            second: match kind {
                OptimizerKind::AdamW { .. } => zeros(),
                OptimizerKind::Sgd { .. } => Vec::new(),
            },
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `grads` follows [`ModelParams::named`] order.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[Tensor<T>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), Error> {
        let mut leaves = params.leaves_mut();
        if grads.len() != leaves.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), leaves.len())));
        }
        self.steps += 1;
        let lr_t = T::of(lr);
        for (i, (p, grad)) in leaves.iter_mut().zip(grads).enumerate() {
            if grad.shape() != p.shape() {
                return Err(Error::Invalid(format!(
                    "gradient {:?} does not match parameter {:?}",
                    grad.shape(),
                    p.shape()
                )));
            }
            let wd = if self.decay[i] { T::of(lr * weight_decay) } else { T::zero() };
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::of(1.0 - beta1.powi(self.steps as i32));
                    let c2 = T::of(1.0 - beta2.powi(self.steps as i32));
                    let eps = T::of(eps);
                    for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * gr;
                        *v = b2 * *v + (T::one() - b2) * gr * gr;
                        let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                        *w = *w - wd * *w - lr_t * update;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let mu = T::of(momentum);
                    for ((w, &gr), m) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()) {
                        *m = mu * *m + gr;
                        *w = *w - wd * *w - lr_t * *m;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup` steps, then cosine decay from `base` to
/// `min` at `total` steps.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, min: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}
