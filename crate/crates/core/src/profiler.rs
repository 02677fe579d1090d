//! Analytic multiply-accumulate counts and wall-clock throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::model::{count_parameters, kept_count, ModelConfig, SubnetConfig, SubnetLabel};
use crate::Error;

/// Untimed runs before a throughput measurement.
pub const WARMUP_RUNS: usize = 3;

/// Q/K/V/output projections plus the two attention products:
/// `4ND^2 + 2N^2D`.
pub fn mhsa_macs(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

/// Two linear layers `D -> D_ff -> D` over `n` tokens.
pub fn ffn_macs(n: u64, d: u64, d_ff: u64) -> u64 {
    2 * n * d * d_ff
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMacs {
    pub embedding: u64,
    pub mhsa: u64,
    pub ffn: u64,
    pub head: u64,
}

impl ComponentMacs {
    pub fn total(&self) -> u64 {
        self.embedding + self.mhsa + self.ffn + self.head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// 1-indexed block.
    pub block: usize,
    /// Tokens (class token included) seen by the attention.
    pub attention_tokens: usize,
    /// Tokens (class token included) seen by the FFN.
    pub ffn_tokens: usize,
    pub mhsa_macs: u64,
    pub ffn_macs: u64,
}

/// Conventions behind the numbers of a [`CostReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMetadata {
    pub mac_convention: String,
    pub attention_scale: String,
    pub pruning_location: String,
    pub excluded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub subnet: SubnetConfig,
    pub label: SubnetLabel,
    pub layers: Vec<LayerCost>,
    pub components: ComponentMacs,
    pub total_macs: u64,
    pub parameters: u64,
    pub metadata: CostMetadata,
}

impl CostReport {
    /// Total in units of 10^9 MACs.
    pub fn gmacs(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }
}

/// Token counts entering the attention and the FFN of each block.
pub fn token_trajectory(cfg: &ModelConfig, sc: SubnetConfig) -> Vec<(usize, usize)> {
    let rate = cfg.keep_rates[sc.rate];
    let mut n = cfg.patch_tokens(sc.grid) + 1;
    (0..cfg.depth)
        .map(|l| {
            let before = n;
            if rate < 1.0 && cfg.is_drop_block(l) {
                n = kept_count(n - 1, rate) + 1;
            }
            (before, n)
        })
        .collect()
}

/// MAC count of one subnet. Patch alignment (bilinear resizing), layer
/// norms, softmax, GELU and bias additions are not counted.
pub fn model_macs(cfg: &ModelConfig, sc: SubnetConfig) -> Result<CostReport, Error> {
    cfg.validate_architecture()?;
    cfg.check_subnet(sc)?;
    let d = cfg.dim as u64;
    let patches = cfg.patch_tokens(sc.grid) as u64;
    let mut components = ComponentMacs {
        embedding: patches * cfg.patch_features() as u64 * d,
        head: d * cfg.num_classes as u64,
        ..Default::default()
    };
    let layers: Vec<LayerCost> = token_trajectory(cfg, sc)
        .into_iter()
        .enumerate()
        .map(|(l, (before, after))| LayerCost {
            block: l + 1,
            attention_tokens: before,
            ffn_tokens: after,
            mhsa_macs: mhsa_macs(before as u64, d),
            ffn_macs: ffn_macs(after as u64, d, cfg.ffn_dim as u64),
        })
        .collect();
    components.mhsa = layers.iter().map(|l| l.mhsa_macs).sum();
    components.ffn = layers.iter().map(|l| l.ffn_macs).sum();
    Ok(CostReport {
        subnet: sc,
        label: cfg.label(sc),
        layers,
        components,
        total_macs: components.total(),
        parameters: count_parameters(cfg),
        metadata: CostMetadata {
            mac_convention: "one multiply-accumulate is one reported FLOP".into(),
            attention_scale: cfg.attention_scale.describe().into(),
            pruning_location: "after the attention residual, before the FFN of each drop block".into(),
            excluded: ["patch resizing", "layer norm", "softmax", "gelu", "bias"]
                .map(String::from)
                .to_vec(),
        },
    })
}

/// Cost of every subnet in grid-major order.
pub fn cost_table(cfg: &ModelConfig) -> Result<Vec<CostReport>, Error> {
    cfg.subnets().map(|sc| model_macs(cfg, sc)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub images_per_second: f64,
    pub batch_size: usize,
    pub repeats: usize,
    pub total_seconds: f64,
}

/// Times `repeats` calls of `run` (one batch each) after
/// [`WARMUP_RUNS`] untimed calls; throughput is
/// `batch * repeats / total time`.
pub fn throughput_bench(
    batch_size: usize,
    repeats: usize,
    mut run: impl FnMut() -> Result<(), Error>,
) -> Result<ThroughputReport, Error> {
    if repeats == 0 || batch_size == 0 {
        return Err(Error::Config("throughput needs batch_size >= 1 and repeats >= 1".into()));
    }
    for _ in 0..WARMUP_RUNS {
        run()?;
    }
    let start = Instant::now();
    for _ in 0..repeats {
        run()?;
    }
    let total_seconds = start.elapsed().as_secs_f64();
    Ok(ThroughputReport {
        images_per_second: (batch_size * repeats) as f64 / total_seconds,
        batch_size,
        repeats,
        total_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_examples() {
        assert_eq!(mhsa_macs(197, 384), 146_000_640);
        assert_eq!(mhsa_macs(1, 384), 4 * 384 * 384 + 2 * 384);
        assert_eq!(ffn_macs(197, 384, 1536), 232_390_656);
        assert_eq!(ffn_macs(0, 384, 1536), 0);
        assert_eq!(ffn_macs(10, 8, 4), 10 * ffn_macs(1, 8, 4));
        for n in 1..50 {
            assert!(mhsa_macs(2 * n, 64) > 2 * mhsa_macs(n, 64));
        }
    }

    #[test]
    fn trajectory_matches_ceiling_arithmetic() {
        let cfg = ModelConfig::deit_small();
        let sc = cfg.find(SubnetLabel { grid: 14, rate: 0.5 }).unwrap();
        let t = token_trajectory(&cfg, sc);
        assert_eq!(t[3], (197, 99));
        assert_eq!(t[6], (99, 50));
        assert_eq!(t[9], (50, 26));
        assert_eq!(t[11], (26, 26));
    }

    #[test]
    fn report_components_sum() {
        let cfg = ModelConfig::toy();
        for r in cost_table(&cfg).unwrap() {
            assert_eq!(r.total_macs, r.components.total());
            assert_eq!(r.layers.len(), cfg.depth);
        }
    }

    #[test]
    fn zero_repeats_rejected() {
        assert!(throughput_bench(1, 0, || Ok(())).is_err());
    }
}
