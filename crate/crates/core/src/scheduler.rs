//! Elastic inference: a confidence-gated early-exit cascade and
//! budget-driven subnet selection.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{aligned_patch_features, forward_features, ModelConfig, ModelParams, SubnetConfig, SubnetLabel};
use crate::numerics::{Graph, Real, Tensor};
use crate::profiler::model_macs;
use crate::training::{predict, Predictions};
use crate::Error;

/// Subnets tried cheapest first, and the confidence needed to stop.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadePolicy {
    stages: Vec<SubnetConfig>,
    stage_macs: Vec<u64>,
    threshold: f64,
}

impl CascadePolicy {
    /// Stages must be valid subnets in nondecreasing MAC order; the
    /// threshold must lie in `[0, 1]`.
    pub fn new(cfg: &ModelConfig, stages: Vec<SubnetConfig>, threshold: f64) -> Result<Self, Error> {
        if stages.is_empty() {
            return Err(Error::Config("a cascade needs at least one stage".into()));
        }
        check_threshold(threshold)?;
        let stage_macs = stages
            .iter()
            .map(|&sc| model_macs(cfg, sc).map(|r| r.total_macs))
            .collect::<Result<Vec<_>, _>>()?;
        if stage_macs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!("cascade stages must be ordered by ascending cost, got {stage_macs:?}")));
        }
        Ok(Self {
            stages,
            stage_macs,
            threshold,
        })
    }

    /// Coarsest grid at the lowest rate, then the finest grid at the
    /// second rate (the first rate when only one exists).
    pub fn two_stage(cfg: &ModelConfig, threshold: f64) -> Result<Self, Error> {
        let second = SubnetConfig::new(cfg.num_grids() - 1, 1.min(cfg.num_rates() - 1));
        Self::new(cfg, vec![cfg.smallest(), second], threshold)
    }

    pub fn stages(&self) -> &[SubnetConfig] {
        &self.stages
    }

    pub fn stage_macs(&self) -> &[u64] {
        &self.stage_macs
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(&self, threshold: f64) -> Result<Self, Error> {
        check_threshold(threshold)?;
        Ok(Self {
            threshold,
            ..self.clone()
        })
    }
}

fn check_threshold(t: f64) -> Result<(), Error> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {t} outside [0, 1]")))
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Arg-max of `logits` (first maximum), its softmax probability, and `ln(1 - p_max)`
/// computed without cancellation.
pub fn confidence(logits: &[f64]) -> (usize, f64, f64) {
    let best = crate::training::argmax_of(logits);
    let top = logits[best];
    let all = log_sum_exp(logits.iter().map(|&l| l - top));
    let others = log_sum_exp(logits.iter().enumerate().filter(|&(i, _)| i != best).map(|(_, &l)| l - top));
    (best, (-all).exp(), others - all)
}

/// Whether a stage with these logits is confident enough to stop:
/// `p_max >= threshold`, tested as `ln(1 - p_max) <= ln(1 - threshold)`.
/// A threshold of 1 is never met by finite logits over two or more
/// classes; a threshold of 0 is always met.
pub fn exits(logits: &[f64], threshold: f64) -> bool {
    let (_, _, log_doubt) = confidence(logits);
    log_doubt <= (1.0 - threshold).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    pub label: usize,
    /// Maximum softmax probability of the deciding stage.
    pub confidence: f64,
    pub macs_spent: u64,
    /// 0-based index of the deciding stage.
    pub stage: usize,
}

/// Applies the exit rule to precomputed per-stage logits. The last stage
/// always decides.
pub fn replay(policy: &CascadePolicy, stage_logits: &[&[f64]]) -> Result<CascadeOutcome, Error> {
    if stage_logits.len() != policy.stages.len() {
        return Err(Error::Invalid(format!(
            "{} stage outputs for {} stages",
            stage_logits.len(),
            policy.stages.len()
        )));
    }
    let mut spent = 0;
    for (i, logits) in stage_logits.iter().enumerate() {
        spent += policy.stage_macs[i];
        let last = i + 1 == stage_logits.len();
        if last || exits(logits, policy.threshold) {
            let (label, p, _) = confidence(logits);
            return Ok(CascadeOutcome {
                label,
                confidence: p,
                macs_spent: spent,
                stage: i,
            });
        }
    }
    unreachable!("the last stage always exits")
}

/// Runs the cascade on one `[S, S, C]` image, stopping at the first
/// confident stage.
pub fn cascade_infer<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    policy: &CascadePolicy,
) -> Result<CascadeOutcome, Error> {
    cfg.validate()?;
    let &[s, s2, c] = image.shape() else {
        return Err(Error::Config(format!("expected one [S, S, C] image, got {:?}", image.shape())));
    };
    if s != cfg.image_side || s2 != s || c != cfg.channels {
        return Err(Error::Config(format!("image {:?} does not match the model", image.shape())));
    }
    let batch = image.clone().reshape(&[1, s, s, c])?;
    let mut spent = 0;
    for (i, &sc) in policy.stages.iter().enumerate() {
        let features = aligned_patch_features(&batch, cfg.grids[sc.grid], cfg.base_patch)?;
        let mut g = Graph::new();
        let vars = params.register_frozen(&mut g);
        let out = forward_features(&mut g, cfg, &vars, &features, sc)?;
        let logits: Vec<f64> = g.value(out.logits).data().iter().map(|v| v.to_f64_lossy()).collect();
        spent += policy.stage_macs[i];
        if i + 1 == policy.stages.len() || exits(&logits, policy.threshold) {
            let (label, confidence, _) = confidence(&logits);
            return Ok(CascadeOutcome {
                label,
                confidence,
                macs_spent: spent,
                stage: i,
            });
        }
    }
    unreachable!("the last stage always exits")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mean_macs: f64,
    pub accuracy: f64,
}

/// Per-stage predictions over a dataset, recorded once and replayed for
/// any threshold.
#[derive(Clone, Debug)]
pub struct CascadeRecording {
    pub stages: Vec<Predictions>,
}

impl CascadeRecording {
    pub fn record<T: Real>(
        cfg: &ModelConfig,
        params: &ModelParams<T>,
        data: &Dataset,
        policy: &CascadePolicy,
        batch_size: usize,
    ) -> Result<Self, Error> {
        let stages = policy
            .stages
            .iter()
            .map(|&sc| predict(cfg, params, data, sc, batch_size))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { stages })
    }

    pub fn outcomes(&self, policy: &CascadePolicy) -> Result<Vec<CascadeOutcome>, Error> {
        let n = self.stages.first().map_or(0, Predictions::len);
        (0..n)
            .map(|i| {
                let rows: Vec<&[f64]> = self.stages.iter().map(|p| p.row(i)).collect();
                replay(policy, &rows)
            })
            .collect()
    }

    pub fn point(&self, policy: &CascadePolicy) -> Result<SweepPoint, Error> {
        let outcomes = self.outcomes(policy)?;
        if outcomes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let labels = &self.stages[0].labels;
        let n = outcomes.len() as f64;
        Ok(SweepPoint {
            threshold: policy.threshold,
            mean_macs: outcomes.iter().map(|o| o.macs_spent as f64).sum::<f64>() / n,
            accuracy: outcomes.iter().zip(labels).filter(|(o, &y)| o.label == y).count() as f64 / n,
        })
    }
}

/// Accuracy and mean cost of the cascade for each threshold (ascending).
pub fn sweep_threshold<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    data: &Dataset,
    policy: &CascadePolicy,
    thresholds: &[f64],
    batch_size: usize,
) -> Result<Vec<SweepPoint>, Error> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config(format!("thresholds {thresholds:?} must be non-empty and ascending")));
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    let rec = CascadeRecording::record(cfg, params, data, policy, batch_size)?;
    thresholds
        .iter()
        .map(|&t| rec.point(&policy.with_threshold(t)?))
        .collect()
}

/// One row of a per-subnet accuracy/cost table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub grid: usize,
    pub rate: f64,
    pub accuracy: f64,
    pub macs: u64,
}

impl TableEntry {
    pub fn label(&self) -> SubnetLabel {
        SubnetLabel {
            grid: self.grid,
            rate: self.rate,
        }
    }
}

/// Per-subnet validation accuracy and cost, as written by `eval --all`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetTable {
    pub config_hash: Option<String>,
    pub entries: Vec<TableEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetPolicy {
    pub budget_macs: u64,
    pub accuracy: Vec<(SubnetLabel, f64)>,
    pub cost: Vec<(SubnetLabel, u64)>,
}

impl BudgetPolicy {
    pub fn from_table(budget_macs: u64, table: &SubnetTable) -> Self {
        Self {
            budget_macs,
            accuracy: table.entries.iter().map(|e| (e.label(), e.accuracy)).collect(),
            cost: table.entries.iter().map(|e| (e.label(), e.macs)).collect(),
        }
    }
}

fn same_subnet(a: SubnetLabel, b: SubnetLabel) -> bool {
    a.grid == b.grid && (a.rate - b.rate).abs() < 1e-9
}

/// The most accurate subnet whose cost fits the budget; equal accuracies
/// go to the cheaper subnet, then to the earlier table entry.
pub fn select_for_budget(bp: &BudgetPolicy) -> Result<SubnetLabel, Error> {
    if bp.accuracy.len() != bp.cost.len()
        || bp.accuracy.iter().any(|&(l, _)| !bp.cost.iter().any(|&(c, _)| same_subnet(l, c)))
    {
        return Err(Error::Invalid("accuracy and cost tables cover different subnets".into()));
    }
    let mut best: Option<(SubnetLabel, f64, u64)> = None;
    for &(label, acc) in &bp.accuracy {
        let macs = bp.cost.iter().find(|&&(c, _)| same_subnet(label, c)).expect("checked").1;
        if macs > bp.budget_macs {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, a, m)) => acc > a || (acc == a && macs < m),
        };
        if better {
            best = Some((label, acc, macs));
        }
    }
    best.map(|b| b.0).ok_or(Error::Infeasible { budget: bp.budget_macs })
}
