use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::SubnetConfig;
use crate::numerics::{Graph, Real, Var};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy against the labels (unpruned subnets).
    Ce,
    /// KL divergence towards the unpruned subnet on the same grid.
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPart {
    pub subnet: SubnetConfig,
    pub kind: LossKind,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub parts: Vec<LossPart>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn part(&self, sc: SubnetConfig) -> Option<&LossPart> {
        self.parts.iter().find(|p| p.subnet == sc)
    }
}

/// Supernet objective: cross-entropy for every unpruned prediction plus
/// `KL(p_student || p_teacher)` for every pruned one, where the teacher is
/// the unpruned prediction on the same grid. Terms are summed in subnet
/// order.
///
/// With `detach_teacher` the KL terms send no gradient into the teacher.
pub fn supernet_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &BTreeMap<SubnetConfig, Var>,
    labels: &[usize],
    detach_teacher: bool,
) -> Result<(Var, LossBreakdown), Error> {
    if preds.is_empty() {
        return Err(Error::Invalid("supernet loss needs at least one prediction".into()));
    }
    let mut parts = Vec::with_capacity(preds.len());
    let mut total: Option<Var> = None;
    for (&sc, &p) in preds {
        let (term, kind) = if sc.is_full() {
            (g.cross_entropy(p, labels)?, LossKind::Ce)
        } else {
            let teacher = *preds.get(&sc.teacher()).ok_or_else(|| Error::MissingTeacher {
                subnet: sc.to_string(),
                teacher: sc.teacher().to_string(),
            })?;
            let teacher = if detach_teacher { g.detach(teacher) } else { teacher };
            (g.kl_divergence(p, teacher)?, LossKind::Kl)
        };
        parts.push(LossPart {
            subnet: sc,
            kind,
            value: g.value(term).item().to_f64_lossy(),
        });
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.expect("non-empty");
    let value = g.value(total).item().to_f64_lossy();
    Ok((total, LossBreakdown { parts, total: value }))
}
