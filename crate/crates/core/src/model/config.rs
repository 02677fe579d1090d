use std::fmt;

use serde::{Deserialize, Serialize};

use crate::Error;

/// Scale applied to query-key logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `1 / sqrt(D / H)`, the per-head dimension.
    #[default]
    PerHead,
    /// `1 / sqrt(D)`, the full token dimension.
    FullDim,
}

impl AttentionScale {
    pub fn factor(self, dim: usize, heads: usize) -> f64 {
        match self {
            Self::PerHead => 1.0 / ((dim / heads) as f64).sqrt(),
            Self::FullDim => 1.0 / (dim as f64).sqrt(),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::PerHead => "1/sqrt(D/H)",
            Self::FullDim => "1/sqrt(D)",
        }
    }
}

/// Which patch tokens are removed at a drop block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PruningPolicy {
    /// Remove the lowest class-attention tokens.
    #[default]
    LowAttended,
    /// Of the removed tokens, `high_fraction` are taken from the highest
    /// class-attention end and the rest from the lowest.
    Mixed { high_fraction: f64 },
}

/// Architecture and elastic dimensions of the supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub image_side: usize,
    pub channels: usize,
    /// Patches per image side for each branch, strictly ascending.
    pub grids: Vec<usize>,
    /// Side every patch is resized to before the shared embedding.
    pub base_patch: usize,
    /// Strictly descending, starting at 1.0.
    pub keep_rates: Vec<f64>,
    /// 1-indexed encoder blocks where pruning is applied.
    pub drop_blocks: Vec<usize>,
    #[serde(default)]
    pub attention_scale: AttentionScale,
    #[serde(default)]
    pub pruning_policy: PruningPolicy,
}

impl ModelConfig {
    /// Desk-scale default: 40px images, three grids, six blocks.
    pub fn toy() -> Self {
        Self {
            depth: 6,
            dim: 64,
            heads: 4,
            ffn_dim: 128,
            num_classes: 4,
            image_side: 40,
            channels: 3,
            grids: vec![4, 5, 8],
            base_patch: 8,
            keep_rates: vec![1.0, 0.7, 0.5],
            drop_blocks: vec![2, 4],
            attention_scale: AttentionScale::PerHead,
            pruning_policy: PruningPolicy::LowAttended,
        }
    }

    /// DeiT-S dimensions over the 8..14 grid set (analytic profiling only).
    pub fn deit_small() -> Self {
        Self {
            depth: 12,
            dim: 384,
            heads: 6,
            ffn_dim: 1536,
            num_classes: 1000,
            image_side: 224,
            channels: 3,
            grids: vec![8, 10, 12, 14],
            base_patch: 16,
            keep_rates: vec![1.0, 0.7, 0.5],
            drop_blocks: vec![4, 7, 10],
            attention_scale: AttentionScale::PerHead,
            pruning_policy: PruningPolicy::LowAttended,
        }
    }

    /// DeiT-T dimensions over the 8..14 grid set (analytic profiling only).
    pub fn deit_tiny() -> Self {
        Self {
            dim: 192,
            heads: 3,
            ffn_dim: 768,
            ..Self::deit_small()
        }
    }

    pub fn num_grids(&self) -> usize {
        self.grids.len()
    }

    pub fn num_rates(&self) -> usize {
        self.keep_rates.len()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Patch tokens (class token excluded) for a grid index.
    pub fn patch_tokens(&self, grid: usize) -> usize {
        self.grids[grid] * self.grids[grid]
    }

    /// Pixel side of a patch in a grid branch.
    pub fn patch_side(&self, grid: usize) -> usize {
        self.image_side / self.grids[grid]
    }

    pub fn patch_features(&self) -> usize {
        self.base_patch * self.base_patch * self.channels
    }

    pub fn is_drop_block(&self, block: usize) -> bool {
        self.drop_blocks.contains(&(block + 1))
    }

    pub fn subnets(&self) -> impl Iterator<Item = SubnetConfig> + '_ {
        (0..self.num_grids()).flat_map(move |g| (0..self.num_rates()).map(move |m| SubnetConfig::new(g, m)))
    }

    /// Finest grid, no pruning.
    pub fn largest(&self) -> SubnetConfig {
        SubnetConfig::new(self.num_grids() - 1, 0)
    }

    /// Coarsest grid, lowest keep rate.
    pub fn smallest(&self) -> SubnetConfig {
        SubnetConfig::new(0, self.num_rates() - 1)
    }

    pub fn label(&self, sc: SubnetConfig) -> SubnetLabel {
        SubnetLabel {
            grid: self.grids[sc.grid],
            rate: self.keep_rates[sc.rate],
        }
    }

    pub fn find(&self, label: SubnetLabel) -> Option<SubnetConfig> {
        let g = self.grids.iter().position(|&s| s == label.grid)?;
        let m = self.keep_rates.iter().position(|&r| (r - label.rate).abs() < 1e-9)?;
        Some(SubnetConfig::new(g, m))
    }

    /// Checks everything except image-side divisibility; enough for analytic
    /// cost accounting.
    pub fn validate_architecture(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("depth, dim, heads and ffn_dim must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.num_classes < 2 || self.channels == 0 || self.base_patch == 0 {
            return bad("num_classes must be >= 2; channels and base_patch positive".into());
        }
        if self.grids.is_empty() || self.grids[0] == 0 || self.grids.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("grids {:?} must be positive and strictly ascending", self.grids));
        }
        if self.keep_rates.first() != Some(&1.0) {
            return bad(format!("keep_rates {:?} must start with 1.0", self.keep_rates));
        }
        if self.keep_rates.windows(2).any(|w| w[0] <= w[1]) || self.keep_rates.iter().any(|&r| r <= 0.0) {
            return bad(format!(
                "keep_rates {:?} must be strictly descending and positive",
                self.keep_rates
            ));
        }
        if self.drop_blocks.iter().any(|&b| b == 0 || b > self.depth) {
            return bad(format!(
                "drop_blocks {:?} must lie in 1..={}",
                self.drop_blocks, self.depth
            ));
        }
        if let PruningPolicy::Mixed { high_fraction } = self.pruning_policy {
            if !(0.0..=1.0).contains(&high_fraction) {
                return bad(format!("high_fraction {high_fraction} must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Full validation for building and running the network.
    pub fn validate(&self) -> Result<(), Error> {
        self.validate_architecture()?;
        if let Some(&s) = self.grids.iter().find(|&&s| self.image_side % s != 0) {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by grid {s}",
                self.image_side
            )));
        }
        Ok(())
    }

    pub fn check_subnet(&self, sc: SubnetConfig) -> Result<(), Error> {
        if sc.grid >= self.num_grids() || sc.rate >= self.num_rates() {
            return Err(Error::Config(format!(
                "subnet (grid {}, rate {}) outside {}x{} configurations",
                sc.grid,
                sc.rate,
                self.num_grids(),
                self.num_rates()
            )));
        }
        Ok(())
    }
}

/// One (grid, keep rate) execution of the supernet, as 0-based indices into
/// [`ModelConfig::grids`] and [`ModelConfig::keep_rates`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub grid: usize,
    pub rate: usize,
}

impl SubnetConfig {
    pub fn new(grid: usize, rate: usize) -> Self {
        Self { grid, rate }
    }

    /// Whether this subnet prunes no tokens.
    pub fn is_full(self) -> bool {
        self.rate == 0
    }

    /// The unpruned subnet on the same grid.
    pub fn teacher(self) -> Self {
        Self::new(self.grid, 0)
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "grid #{}, rate #{}", self.grid, self.rate)
    }
}

/// Human-facing name of a subnet: grid side and keep rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetLabel {
    pub grid: usize,
    pub rate: f64,
}

impl fmt::Display for SubnetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{0}x{0}@{1:.1}", self.grid, self.rate)
    }
}

impl std::str::FromStr for SubnetLabel {
    type Err = Error;

    /// Parses `"8x8@0.5"`.
    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Config(format!("subnet {s:?} is not of the form <side>x<side>@<rate>"));
        let (grid, rate) = s.split_once('@').ok_or_else(bad)?;
        let (a, b) = grid.split_once('x').ok_or_else(bad)?;
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a != b {
            return Err(bad());
        }
        Ok(SubnetLabel {
            grid: a,
            rate: rate.trim().parse().map_err(|_| bad())?,
        })
    }
}
