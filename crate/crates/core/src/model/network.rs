use super::params::{BlockParams, ParamVars};
use super::patches::aligned_patch_features;
use super::pruning::prune_tokens;
use super::{ModelConfig, SubnetConfig};
use crate::numerics::{Graph, Real, Tensor, Var, LAYER_NORM_EPS};
use crate::Error;

/// Token sequences flowing through the encoder.
#[derive(Clone, Debug)]
pub struct TokenBatch<T> {
    /// `[B, N_cur, D]`, class token at position 0.
    pub tokens: Var,
    /// Per sample, the original sequence position of each surviving token
    /// (0 is the class token, patch `i` is position `i`).
    pub kept_index: Vec<Vec<usize>>,
    /// Class attention `[B, N_cur]` (summed over heads) of every executed
    /// block, over the tokens present at that block.
    pub attention: Vec<Tensor<T>>,
}

impl<T> TokenBatch<T> {
    pub fn len(&self) -> usize {
        self.kept_index.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Outputs of a full forward pass.
#[derive(Debug)]
pub struct ForwardOutput<T> {
    /// `[B, K]` pre-softmax scores.
    pub logits: Var,
    /// `[B, K]` class probabilities.
    pub probs: Var,
    pub trace: TokenBatch<T>,
    /// Tokens (class token included) entering the attention and the FFN of
    /// each block.
    pub token_counts: Vec<(usize, usize)>,
}

/// Embeds `[B, N, base^2 * C]` aligned patch features with the shared
/// projection, prepends the class token and adds the grid's positional table.
pub fn embed_features<T: Real>(
    g: &mut Graph<T>,
    params: &ParamVars,
    features: &Tensor<T>,
    grid: usize,
) -> Result<TokenBatch<T>, Error> {
    let pos = *params
        .pos
        .get(grid)
        .ok_or_else(|| Error::Config(format!("no positional table for grid index {grid}")))?;
    let &[b, n, _] = features.shape() else {
        return Err(Error::Config(format!("features must be [B, N, F], got {:?}", features.shape())));
    };
    let x = g.constant(features.clone());
    let patches = g.linear(x, params.patch_w, Some(params.patch_b))?;
    let cls = g.broadcast_leading(params.cls_token, b)?;
    let tokens = g.concat(&[cls, patches], 1)?;
    let tokens = g.add_broadcast(tokens, pos)?;
    Ok(TokenBatch {
        tokens,
        kept_index: vec![(0..=n).collect(); b],
        attention: Vec::new(),
    })
}

/// Splits images on grid `grid`, aligns every patch to the base patch size
/// by bilinear resizing and embeds them.
pub fn align_and_embed<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    images: &Tensor<T>,
    grid: usize,
) -> Result<TokenBatch<T>, Error> {
    let side = *cfg
        .grids
        .get(grid)
        .ok_or_else(|| Error::Config(format!("unknown grid index {grid}")))?;
    let features = aligned_patch_features(images, side, cfg.base_patch)?;
    embed_features(g, params, &features, grid)
}

fn split_heads<T: Real>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var, Error> {
    let &[b, n, d] = g.shape(x) else { unreachable!("tokens are rank 3") };
    let r = g.reshape(x, &[b, n, heads, d / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

/// Multi-head self-attention over `[B, N, D]` tokens. Returns the projected
/// output and the head-summed class-token attention row `[B, N]`.
pub fn mhsa<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BlockParams<Var>,
    x: Var,
) -> Result<(Var, Tensor<T>), Error> {
    let &[b, n, d] = g.shape(x) else {
        return Err(Error::Config(format!("tokens must be [B, N, D], got {:?}", g.shape(x))));
    };
    let h = cfg.heads;
    let q = g.linear(x, p.wq, Some(p.bq))?;
    let k = g.linear(x, p.wk, Some(p.bk))?;
    let v = g.linear(x, p.wv, Some(p.bv))?;
    let q = split_heads(g, q, h)?;
    let k = split_heads(g, k, h)?;
    let v = split_heads(g, v, h)?;
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::of(cfg.attention_scale.factor(d, h)));
    let attn = g.softmax(scores);

    let weights = g.value(attn).data();
    let mut class_attention = vec![T::zero(); b * n];
    for bi in 0..b {
        let row = &mut class_attention[bi * n..(bi + 1) * n];
        for hi in 0..h {
            let base = (bi * h + hi) * n * n;
            for (r, &w) in row.iter_mut().zip(&weights[base..base + n]) {
                *r += w;
            }
        }
    }

    let ctx = g.batch_matmul(attn, v, false)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let out = g.linear(ctx, p.wo, Some(p.bo))?;
    Ok((out, Tensor::new(vec![b, n], class_attention)?))
}

fn ffn<T: Real>(g: &mut Graph<T>, p: &BlockParams<Var>, x: Var) -> Result<Var, Error> {
    let h = g.linear(x, p.fc1_w, Some(p.fc1_b))?;
    let h = g.gelu(h);
    Ok(g.linear(h, p.fc2_w, Some(p.fc2_b))?)
}

/// One pre-norm encoder block. When `keep_rate` is below 1, tokens are
/// pruned after the attention residual and before the FFN, using this
/// block's class attention.
pub fn encoder_block<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &BlockParams<Var>,
    tb: TokenBatch<T>,
    keep_rate: Option<f64>,
) -> Result<TokenBatch<T>, Error> {
    let eps = T::of(LAYER_NORM_EPS);
    let h = g.layer_norm(tb.tokens, p.norm1_gamma, p.norm1_beta, eps)?;
    let (attn_out, class_attention) = mhsa(g, cfg, p, h)?;
    let y = g.add(tb.tokens, attn_out)?;
    let mut tb = TokenBatch { tokens: y, ..tb };
    if let Some(rate) = keep_rate {
        tb = prune_tokens(g, tb, &class_attention, rate, cfg.pruning_policy)?;
    }
    tb.attention.push(class_attention);
    let h = g.layer_norm(tb.tokens, p.norm2_gamma, p.norm2_beta, eps)?;
    let f = ffn(g, p, h)?;
    tb.tokens = g.add(tb.tokens, f)?;
    Ok(tb)
}

/// Runs the encoder stack and the classification head on embedded tokens.
pub fn forward_tokens<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    mut tb: TokenBatch<T>,
    rate: usize,
) -> Result<ForwardOutput<T>, Error> {
    let keep = cfg.keep_rates[rate];
    let mut token_counts = Vec::with_capacity(cfg.depth);
    for (l, block) in params.blocks.iter().enumerate() {
        let before = tb.len();
        let prune = (keep < 1.0 && cfg.is_drop_block(l)).then_some(keep);
        tb = encoder_block(g, cfg, block, tb, prune)?;
        token_counts.push((before, tb.len()));
    }
    let b = tb.kept_index.len();
    let cls = g.gather_rows(tb.tokens, vec![vec![0]; b])?;
    let cls = g.reshape(cls, &[b, cfg.dim])?;
    let cls = g.layer_norm(cls, params.norm_gamma, params.norm_beta, T::of(LAYER_NORM_EPS))?;
    let logits = g.linear(cls, params.head_w, Some(params.head_b))?;
    let probs = g.softmax(logits);
    Ok(ForwardOutput {
        logits,
        probs,
        trace: tb,
        token_counts,
    })
}

/// Full supernet forward for one subnet on `[B, S, S, C]` images.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    images: &Tensor<T>,
    sc: SubnetConfig,
) -> Result<ForwardOutput<T>, Error> {
    cfg.validate()?;
    cfg.check_subnet(sc)?;
    match *images.shape() {
        [_, s, s2, c] if s == cfg.image_side && s2 == s && c == cfg.channels => {}
        ref other => {
            return Err(Error::Config(format!(
                "images {other:?} do not match [B, {0}, {0}, {1}]",
                cfg.image_side, cfg.channels
            )))
        }
    }
    let tb = align_and_embed(g, cfg, params, images, sc.grid)?;
    forward_tokens(g, cfg, params, tb, sc.rate)
}

/// Same as [`forward`] with aligned patch features prepared by the caller
/// (see [`aligned_patch_features`]).
pub fn forward_features<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    features: &Tensor<T>,
    sc: SubnetConfig,
) -> Result<ForwardOutput<T>, Error> {
    cfg.check_subnet(sc)?;
    if features.ndim() != 3 || features.shape()[1] != cfg.patch_tokens(sc.grid) || features.shape()[2] != cfg.patch_features() {
        return Err(Error::Config(format!(
            "features {:?} do not match grid {}",
            features.shape(),
            cfg.grids[sc.grid]
        )));
    }
    let tb = embed_features(g, params, features, sc.grid)?;
    forward_tokens(g, cfg, params, tb, sc.rate)
}
