//! The supernet: multi-granularity patch pipeline, pre-norm encoder with
//! class-attention extraction, token pruning and classification head.

mod config;
mod network;
mod params;
mod patches;
mod pruning;

pub use config::{AttentionScale, ModelConfig, PruningPolicy, SubnetConfig, SubnetLabel};
pub use network::{
    align_and_embed, embed_features, encoder_block, forward, forward_features, forward_tokens, mhsa,
    ForwardOutput, TokenBatch,
};
pub use params::{count_parameters, param_shapes, BlockParams, ModelParams, ParamVars, Params};
pub use patches::{aligned_patch_features, merge_patches, split_patches};
pub use pruning::{kept_count, prune_tokens, select_tokens};
