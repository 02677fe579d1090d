use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cosine_lr, sample_subnets, supernet_loss, LossBreakdown, LossKind, LossPart, Optimizer, SamplingScheme, TrainConfig};
use crate::data::Dataset;
use crate::model::{aligned_patch_features, forward_features, ModelConfig, ModelParams, SubnetConfig};
use crate::numerics::{Graph, Real, Tensor};
use crate::Error;

/// Runs every subnet of `forward_set` on the same batch, computes the
/// supernet loss, backpropagates once and applies one optimizer update.
///
/// A forward set holding a single subnet is trained with plain
/// cross-entropy whatever its rate (individual training).
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    params: &mut ModelParams<T>,
    opt: &mut Optimizer<T>,
    forward_set: &[SubnetConfig],
    images: &Tensor<T>,
    labels: &[usize],
    lr: f64,
) -> Result<LossBreakdown, Error> {
    if forward_set.is_empty() {
        return Err(Error::Invalid("empty forward set".into()));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let mut features: BTreeMap<usize, Tensor<T>> = BTreeMap::new();
    let mut preds = BTreeMap::new();
    for &sc in forward_set {
        cfg.check_subnet(sc)?;
        if !features.contains_key(&sc.grid) {
            let f = aligned_patch_features(images, cfg.grids[sc.grid], cfg.base_patch)?;
            features.insert(sc.grid, f);
        }
        let out = forward_features(&mut g, cfg, &vars, &features[&sc.grid], sc)?;
        preds.insert(sc, out.probs);
    }
    let (loss, breakdown) = if let [sc] = forward_set {
        let loss = g.cross_entropy(preds[sc], labels)?;
        let value = g.value(loss).item().to_f64_lossy();
        let part = LossPart { subnet: *sc, kind: LossKind::Ce, value };
        (loss, LossBreakdown { parts: vec![part], total: value })
    } else {
        supernet_loss(&mut g, &preds, labels, tc.detach_teacher)?
    };
    if let Some(bad) = breakdown.parts.iter().find(|p| !p.value.is_finite()) {
        return Err(Error::NonFiniteLoss {
            subnet: cfg.label(bad.subnet).to_string(),
        });
    }
    let mut grads = g.backward(loss)?;
    let grads = vars
        .named()
        .into_iter()
        .map(|(_, &v)| grads.take(v))
        .collect::<Result<Vec<_>, _>>()?;
    opt.step(params, &grads, lr, tc.weight_decay)?;
    Ok(breakdown)
}

/// Logits of one subnet over a dataset, with the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub num_classes: usize,
    /// `[n * K]` row-major.
    pub logits: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    /// Predicted class of sample `i`; the first maximum wins.
    pub fn predicted(&self, i: usize) -> usize {
        argmax_of(self.row(i))
    }

    pub fn correct(&self, i: usize) -> bool {
        self.predicted(i) == self.labels[i]
    }

    pub fn accuracy(&self) -> f64 {
        (0..self.len()).filter(|&i| self.correct(i)).count() as f64 / self.len() as f64
    }
}

/// Index of the first maximum.
pub fn argmax_of(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs subnet `sc` over the whole dataset in batches. Since softmax is
/// monotone, the arg-max of the logits is the arg-max of the probabilities.
pub fn predict<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    data: &Dataset,
    sc: SubnetConfig,
    batch_size: usize,
) -> Result<Predictions, Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    cfg.check_subnet(sc)?;
    let batch_size = batch_size.max(1);
    let mut logits = Vec::with_capacity(data.len() * cfg.num_classes);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (images, _) = data.batch::<T>(chunk)?;
        let features = aligned_patch_features(&images, cfg.grids[sc.grid], cfg.base_patch)?;
        let mut g = Graph::new();
        let vars = params.register_frozen(&mut g);
        let out = forward_features(&mut g, cfg, &vars, &features, sc)?;
        logits.extend(g.value(out.logits).data().iter().map(|v| v.to_f64_lossy()));
    }
    Ok(Predictions {
        num_classes: cfg.num_classes,
        logits,
        labels: data.labels().to_vec(),
    })
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn evaluate<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    data: &Dataset,
    sc: SubnetConfig,
    batch_size: usize,
) -> Result<f64, Error> {
    Ok(predict(cfg, params, data, sc, batch_size)?.accuracy())
}

/// One line of the metrics stream: a subnet's state after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub config_hash: Option<String>,
    pub epoch: usize,
    /// e.g. `"8x8@1.0"`.
    pub subnet: String,
    pub grid: usize,
    pub rate: f64,
    pub loss_kind: LossKind,
    /// Mean loss over the steps that included this subnet.
    pub loss: Option<f64>,
    pub steps: usize,
    /// Validation accuracy, when evaluated this epoch.
    pub accuracy: Option<f64>,
}

/// Drives supernet training epoch by epoch.
pub struct Trainer<T: Real> {
    model: ModelConfig,
    train: TrainConfig,
    config_hash: Option<String>,
    params: ModelParams<T>,
    opt: Optimizer<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    step: usize,
}

impl<T: Real> Trainer<T> {
    /// Fresh parameters initialised from the training seed.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self, Error> {
        let params = ModelParams::init(&model, train.seed);
        Self::with_params(model, train, params)
    }

    pub fn with_params(model: ModelConfig, train: TrainConfig, params: ModelParams<T>) -> Result<Self, Error> {
        model.validate()?;
        train.validate()?;
        if let SamplingScheme::Single(sc) = train.sampling {
            model.check_subnet(sc)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(1);
        let opt = Optimizer::new(train.optimizer, &params);
        Ok(Self {
            model,
            train,
            config_hash: None,
            params,
            opt,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    /// Hash copied into every emitted record.
    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.params
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `train_data`, then validation accuracy on `val_data`
    /// when this epoch is due for evaluation.
    pub fn run_epoch(&mut self, train_data: &Dataset, val_data: Option<&Dataset>) -> Result<Vec<EpochRecord>, Error> {
        if train_data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let bs = self.train.batch_size;
        let steps_per_epoch = train_data.len().div_ceil(bs);
        let total = steps_per_epoch * self.train.epochs.max(1);
        let warmup = steps_per_epoch * self.train.warmup_epochs;

        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums: BTreeMap<SubnetConfig, (f64, usize)> = BTreeMap::new();
        for chunk in order.chunks(bs) {
            let (images, labels) = train_data.batch::<T>(chunk)?;
            let sample = sample_subnets(&self.model, self.train.sampling, &mut self.rng);
            let lr = cosine_lr(
                self.step,
                total,
                warmup,
                self.train.learning_rate,
                self.train.min_learning_rate,
            );
            let breakdown = train_step(
                &self.model,
                &self.train,
                &mut self.params,
                &mut self.opt,
                &sample.forward,
                &images,
                &labels,
                lr,
            )?;
            for part in &breakdown.parts {
                let e = sums.entry(part.subnet).or_insert((0.0, 0));
                e.0 += part.value;
                e.1 += 1;
            }
            self.step += 1;
        }
        self.epoch += 1;

        let due = self.epoch % self.train.eval_every == 0 || self.epoch >= self.train.epochs;
        let subnets: Vec<SubnetConfig> = self.model.subnets().collect();
        let mut records = Vec::with_capacity(subnets.len());
        for sc in subnets {
            let accuracy = match val_data {
                Some(val) if due => Some(evaluate(&self.model, &self.params, val, sc, bs)?),
                _ => None,
            };
            let (sum, steps) = sums.get(&sc).copied().unwrap_or((0.0, 0));
            let label = self.model.label(sc);
            records.push(EpochRecord {
                config_hash: self.config_hash.clone(),
                epoch: self.epoch,
                subnet: label.to_string(),
                grid: label.grid,
                rate: label.rate,
                loss_kind: if sc.is_full() { LossKind::Ce } else { LossKind::Kl },
                loss: (steps > 0).then(|| sum / steps as f64),
                steps,
                accuracy,
            });
        }
        Ok(records)
    }

    /// Runs the remaining epochs, handing every record to `sink`.
    pub fn fit(
        &mut self,
        train_data: &Dataset,
        val_data: Option<&Dataset>,
        mut sink: impl FnMut(&EpochRecord) -> Result<(), Error>,
    ) -> Result<(), Error> {
        while self.epoch < self.train.epochs {
            for record in self.run_epoch(train_data, val_data)? {
                sink(&record)?;
            }
        }
        Ok(())
    }
}
