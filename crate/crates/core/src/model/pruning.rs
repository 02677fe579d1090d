//! Class-attention token selection.

use super::{PruningPolicy, TokenBatch};
use crate::numerics::{Graph, Real, Tensor};
use crate::Error;

/// Patch tokens surviving a drop block: `ceil(rate * current)`.
///
/// A small slack absorbs binary representation error so that e.g.
/// `0.7 * 10` keeps 7 rather than 8.
pub fn kept_count(current: usize, rate: f64) -> usize {
    if rate >= 1.0 {
        return current;
    }
    let k = (rate * current as f64 - 1e-9).ceil() as usize;
    k.clamp(1.min(current), current)
}

/// Positions kept from a sequence whose position 0 is the class token.
///
/// `scores[i]` is the class attention on position `i`; `scores[0]` is
/// ignored. Returns ascending positions, always starting with 0. Ties are
/// resolved in favour of the lower position.
pub fn select_tokens(scores: &[f64], rate: f64, policy: PruningPolicy) -> Vec<usize> {
    let patches = scores.len().saturating_sub(1);
    let keep = kept_count(patches, rate);
    if keep == patches {
        return (0..scores.len()).collect();
    }
    let mut order: Vec<usize> = (1..scores.len()).collect();
    // stable: equal scores keep ascending position order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let skip_high = match policy {
        PruningPolicy::LowAttended => 0,
        PruningPolicy::Mixed { high_fraction } => ((patches - keep) as f64 * high_fraction).round() as usize,
    };
    let mut kept: Vec<usize> = order[skip_high..skip_high + keep].to_vec();
    kept.sort_unstable();
    let mut out = Vec::with_capacity(keep + 1);
    out.push(0);
    out.extend(kept);
    out
}

/// Drops patch tokens from every sample according to its class attention
/// (`[B, N_cur]`). A rate of 1 returns the batch unchanged.
pub fn prune_tokens<T: Real>(
    g: &mut Graph<T>,
    tb: TokenBatch<T>,
    class_attention: &Tensor<T>,
    rate: f64,
    policy: PruningPolicy,
) -> Result<TokenBatch<T>, Error> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("keep rate {rate} outside (0, 1]")));
    }
    let &[b, n, _] = g.shape(tb.tokens) else {
        return Err(Error::Config(format!("tokens must be [B, N, D], got {:?}", g.shape(tb.tokens))));
    };
    if class_attention.shape() != [b, n] {
        return Err(Error::Config(format!(
            "class attention {:?} does not match tokens [{b}, {n}, _]",
            class_attention.shape()
        )));
    }
    if rate >= 1.0 {
        return Ok(tb);
    }
    let index: Vec<Vec<usize>> = class_attention
        .data()
        .chunks(n)
        .map(|row| {
            let scores: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            select_tokens(&scores, rate, policy)
        })
        .collect();
    let kept_index = tb
        .kept_index
        .iter()
        .zip(&index)
        .map(|(orig, sel)| sel.iter().map(|&p| orig[p]).collect())
        .collect();
    let tokens = g.gather_rows(tb.tokens, index)?;
    Ok(TokenBatch {
        tokens,
        kept_index,
        attention: tb.attention,
    })
}
