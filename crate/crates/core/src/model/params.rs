use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::numerics::{Graph, Real, Tensor, Var};

/// Weights of one encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    pub fc1_w: P,
    pub fc1_b: P,
    pub fc2_w: P,
    pub fc2_b: P,
}

/// All learnable weights, generic over the leaf representation so the same
/// layout holds tensors, tape variables or shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub cls_token: P,
    /// One positional table per grid branch.
    pub pos: Vec<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub norm_gamma: P,
    pub norm_beta: P,
    pub head_w: P,
    pub head_b: P,
}

pub type ModelParams<T> = Params<Tensor<T>>;
pub type ParamVars = Params<Var>;

impl<P> BlockParams<P> {
    fn fields(&self) -> [(&'static str, &P); 16] {
        [
            ("norm1.gamma", &self.norm1_gamma),
            ("norm1.beta", &self.norm1_beta),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("norm2.gamma", &self.norm2_gamma),
            ("norm2.beta", &self.norm2_beta),
            ("ffn.fc1.w", &self.fc1_w),
            ("ffn.fc1.b", &self.fc1_b),
            ("ffn.fc2.w", &self.fc2_w),
            ("ffn.fc2.b", &self.fc2_b),
        ]
    }

    fn fields_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.norm1_gamma,
            &mut self.norm1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> BlockParams<Q> {
        let mut it = self.fields().into_iter().map(|(n, p)| f(&format!("{prefix}.{n}"), p));
        let mut next = || it.next().expect("16 fields");
        BlockParams {
            norm1_gamma: next(),
            norm1_beta: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            norm2_gamma: next(),
            norm2_beta: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }
}

impl<P> Params<P> {
    /// Every leaf with its stable dotted name, in canonical order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out: Vec<(String, &P)> = vec![
            ("patch_embed.w".into(), &self.patch_w),
            ("patch_embed.b".into(), &self.patch_b),
            ("cls_token".into(), &self.cls_token),
        ];
        out.extend(self.pos.iter().enumerate().map(|(g, p)| (format!("pos.{g}"), p)));
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.fields().into_iter().map(|(n, p)| (format!("blocks.{l}.{n}"), p)));
        }
        out.extend([
            ("norm.gamma".into(), &self.norm_gamma),
            ("norm.beta".into(), &self.norm_beta),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
        ]);
        out
    }

    /// Mutable leaves in the same order as [`Params::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls_token];
        out.extend(self.pos.iter_mut());
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Params<Q> {
        Params {
            patch_w: f("patch_embed.w", &self.patch_w),
            patch_b: f("patch_embed.b", &self.patch_b),
            cls_token: f("cls_token", &self.cls_token),
            pos: self
                .pos
                .iter()
                .enumerate()
                .map(|(g, p)| f(&format!("pos.{g}"), p))
                .collect(),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.map(&format!("blocks.{l}"), &mut f))
                .collect(),
            norm_gamma: f("norm.gamma", &self.norm_gamma),
            norm_beta: f("norm.beta", &self.norm_beta),
            head_w: f("head.w", &self.head_w),
            head_b: f("head.b", &self.head_b),
        }
    }
}

/// Expected shape of every parameter tensor.
pub fn param_shapes(cfg: &ModelConfig) -> Params<Vec<usize>> {
    let (d, f) = (cfg.dim, cfg.ffn_dim);
    let block = BlockParams {
        norm1_gamma: vec![d],
        norm1_beta: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        norm2_gamma: vec![d],
        norm2_beta: vec![d],
        fc1_w: vec![d, f],
        fc1_b: vec![f],
        fc2_w: vec![f, d],
        fc2_b: vec![d],
    };
    Params {
        patch_w: vec![cfg.patch_features(), d],
        patch_b: vec![d],
        cls_token: vec![1, d],
        pos: (0..cfg.num_grids())
            .map(|g| vec![cfg.patch_tokens(g) + 1, d])
            .collect(),
        blocks: vec![block; cfg.depth],
        norm_gamma: vec![d],
        norm_beta: vec![d],
        head_w: vec![d, cfg.num_classes],
        head_b: vec![cfg.num_classes],
    }
}

/// Total learnable scalars.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    param_shapes(cfg)
        .named()
        .into_iter()
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

const INIT_STD: f64 = 0.02;

impl<T: Real> ModelParams<T> {
    /// Seeded initialization: weights and embeddings from a normal
    /// distribution truncated at two standard deviations, biases zero,
    /// normalization gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        param_shapes(cfg).map(|name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if leaf == "gamma" {
                Tensor::ones(shape)
            } else if leaf.starts_with('b') && name != "cls_token" {
                Tensor::zeros(shape)
            } else {
                Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * INIT_STD {
                        break T::of(v);
                    }
                })
            }
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        param_shapes(cfg).map(|_, s| Tensor::zeros(s))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(|_, t| t.cast())
    }

    /// Records every tensor as a trainable leaf.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        self.map(|_, t| g.param(t.clone()))
    }

    /// Records every tensor as a constant (inference).
    pub fn register_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        self.map(|_, t| g.constant(t.clone()))
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_positional_table_per_grid() {
        let cfg = ModelConfig::toy();
        let p = ModelParams::<f32>::init(&cfg, 0);
        assert_eq!(p.pos.len(), cfg.num_grids());
        for (g, t) in p.pos.iter().enumerate() {
            assert_eq!(t.shape(), &[cfg.patch_tokens(g) + 1, cfg.dim]);
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::toy();
        let a = ModelParams::<f64>::init(&cfg, 5);
        assert_eq!(a, ModelParams::<f64>::init(&cfg, 5));
        assert_ne!(a, ModelParams::<f64>::init(&cfg, 6));
        let shapes = param_shapes(&cfg);
        for ((n, t), (_, s)) in a.named().iter().zip(shapes.named()) {
            assert_eq!(t.shape(), s.as_slice(), "{n}");
        }
        assert!(a.blocks[0].bq.data().iter().all(|&v| v == 0.0));
        assert!(a.norm_gamma.data().iter().all(|&v| v == 1.0));
        assert!(a.cls_token.data().iter().any(|&v| v != 0.0));
        assert_eq!(a.num_parameters() as u64, count_parameters(&cfg));
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let cfg = ModelConfig::toy();
        let shapes = param_shapes(&cfg);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mapped = shapes.map(|n, _| n.to_string());
        let remapped: Vec<String> = mapped.named().into_iter().map(|(_, n)| n.clone()).collect();
        assert_eq!(remapped, names);
    }
}
