//! Supernet objective, subnet sampling, optimisation and evaluation.

mod loss;
mod optim;
mod sampling;
mod trainer;

pub use loss::{supernet_loss, LossBreakdown, LossKind, LossPart};
pub use optim::{cosine_lr, Optimizer, OptimizerKind};
pub use sampling::{sample_subnets, SamplingScheme, SubnetSample};
pub use trainer::{argmax_of, evaluate, predict, train_step, EpochRecord, Predictions, Trainer};

use serde::{Deserialize, Serialize};

use crate::Error;

/// Element type used for a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    /// Bit-reproducible reference mode.
    F64,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    #[serde(default)]
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub sampling: SamplingScheme,
    /// Stop gradients from the KL terms into the unpruned teacher.
    #[serde(default = "default_true")]
    pub detach_teacher: bool,
    #[serde(default)]
    pub precision: Precision,
    /// Validation accuracy is computed every this many epochs and always
    /// after the last one.
    #[serde(default = "default_one")]
    pub eval_every: usize,
}

impl TrainConfig {
    /// Settings used for the synthetic-shapes toy model.
    pub fn toy() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            seed: 0,
            learning_rate: 2e-3,
            min_learning_rate: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 2,
            optimizer: OptimizerKind::default(),
            sampling: SamplingScheme::Four,
            detach_teacher: true,
            precision: Precision::F32,
            eval_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite())
            || !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate)
        {
            return bad(format!(
                "learning rates must satisfy 0 <= min ({}) <= base ({})",
                self.min_learning_rate, self.learning_rate
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        match self.optimizer {
            OptimizerKind::AdamW { beta1, beta2, eps }
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) =>
            {
                bad("AdamW needs betas in [0, 1) and eps > 0".into())
            }
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => {
                bad(format!("momentum {momentum} outside [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}
