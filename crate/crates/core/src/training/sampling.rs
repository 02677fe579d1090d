use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, SubnetConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingScheme {
    /// Every (grid, rate) pair at every step.
    All,
    /// Largest and smallest subnets plus two others drawn at random.
    #[default]
    Four,
    /// One subnet alone, trained with cross-entropy (a standalone model).
    Single(SubnetConfig),
}

/// Subnets trained in one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubnetSample {
    /// The sampled complexities.
    pub trained: Vec<SubnetConfig>,
    /// Everything that must be run forward: `trained` plus the unpruned
    /// teacher of every pruned entry, sorted and without duplicates.
    pub forward: Vec<SubnetConfig>,
}

impl SubnetSample {
    fn from_trained(mut trained: Vec<SubnetConfig>) -> Self {
        trained.sort();
        let mut forward: Vec<SubnetConfig> = trained.iter().flat_map(|&sc| [sc, sc.teacher()]).collect();
        forward.sort();
        forward.dedup();
        Self { trained, forward }
    }
}

/// Picks the subnets for one training step.
///
/// `Four` always includes [`ModelConfig::largest`] and
/// [`ModelConfig::smallest`]; the other two are drawn uniformly without
/// replacement from the remaining pairs. With four or fewer pairs in total
/// every pair is trained. `Single` forwards its subnet without a teacher.
pub fn sample_subnets<R: Rng + ?Sized>(cfg: &ModelConfig, scheme: SamplingScheme, rng: &mut R) -> SubnetSample {
    let all: Vec<SubnetConfig> = cfg.subnets().collect();
    if let SamplingScheme::Single(sc) = scheme {
        return SubnetSample {
            trained: vec![sc],
            forward: vec![sc],
        };
    }
    if scheme == SamplingScheme::All || all.len() <= 4 {
        return SubnetSample::from_trained(all);
    }
    let (large, small) = (cfg.largest(), cfg.smallest());
    let rest: Vec<SubnetConfig> = all.into_iter().filter(|&sc| sc != large && sc != small).collect();
    let mut trained = vec![large, small];
    trained.extend(rand::seq::index::sample(rng, rest.len(), 2).into_iter().map(|i| rest[i]));
    SubnetSample::from_trained(trained)
}
