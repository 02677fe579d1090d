mod common;

use common::reference::plain_vit_probs;
use common::{gradcheck, random, rng};
use rand::Rng;
use supervit::model::{
    aligned_patch_features, embed_features, encoder_block, forward, forward_features, mhsa, prune_tokens,
    AttentionScale, ModelConfig, ModelParams, SubnetConfig, TokenBatch,
};
use supervit::numerics::{Graph, Tensor, Var};

fn tiny() -> ModelConfig {
    ModelConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        ffn_dim: 16,
        num_classes: 3,
        image_side: 8,
        channels: 2,
        grids: vec![2, 4],
        base_patch: 3,
        keep_rates: vec![1.0, 0.5],
        drop_blocks: vec![1],
        ..ModelConfig::toy()
    }
}

/// Params with non-trivial norms and biases so every path is exercised.
fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut r = rng(seed);
    let mut p = ModelParams::<f64>::init(cfg, seed);
    for leaf in p.leaves_mut() {
        for v in leaf.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    p
}

fn images(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(&[b, cfg.image_side, cfg.image_side, cfg.channels], |_| r.random_range(0.0..1.0))
}

fn probs_of(cfg: &ModelConfig, p: &ModelParams<f64>, imgs: &Tensor<f64>, sc: SubnetConfig) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let out = forward(&mut g, cfg, &vars, imgs, sc).unwrap();
    g.value(out.probs).clone()
}

#[test]
fn unpruned_forward_matches_plain_vit_reference() {
    for scale in [AttentionScale::PerHead, AttentionScale::FullDim] {
        for cfg in [tiny(), ModelConfig { depth: 2, drop_blocks: vec![1, 2], ..ModelConfig::toy() }] {
            let cfg = ModelConfig { attention_scale: scale, ..cfg };
            for seed in 0..3 {
                let p = perturbed_params(&cfg, seed);
                let imgs = images(&cfg, 2, 100 + seed);
                for grid in 0..cfg.num_grids() {
                    let got = probs_of(&cfg, &p, &imgs, SubnetConfig::new(grid, 0));
                    let per_image = imgs.len() / 2;
                    for b in 0..2 {
                        let want = plain_vit_probs(&cfg, &p, &imgs.data()[b * per_image..(b + 1) * per_image], grid);
                        for (k, w) in want.iter().enumerate() {
                            let diff = (got.at(&[b, k]) - w).abs();
                            assert!(diff < 1e-9, "grid {grid} sample {b}: diff {diff:e}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn probabilities_are_normalized() {
    let cfg = tiny();
    let p = perturbed_params(&cfg, 1);
    for sc in cfg.subnets() {
        let probs = probs_of(&cfg, &p, &images(&cfg, 4, 9), sc);
        for row in probs.data().chunks(cfg.num_classes) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn full_rate_equals_pruning_disabled() {
    let cfg = tiny();
    let no_drop = ModelConfig { drop_blocks: vec![], ..cfg.clone() };
    let p = perturbed_params(&cfg, 2);
    let imgs = images(&cfg, 3, 4);
    let a = probs_of(&cfg, &p, &imgs, SubnetConfig::new(1, 0));
    let b = probs_of(&no_drop, &p, &imgs, SubnetConfig::new(1, 1));
    assert_eq!(a, b);
}

fn block_cfg(heads: usize) -> ModelConfig {
    ModelConfig { dim: 4, heads, ..tiny() }
}

fn tokens(g: &mut Graph<f64>, x: Tensor<f64>) -> TokenBatch<f64> {
    let (b, n) = (x.shape()[0], x.shape()[1]);
    TokenBatch {
        tokens: g.constant(x),
        kept_index: vec![(0..n).collect(); b],
        attention: vec![],
    }
}

#[test]
fn mhsa_matches_per_head_loop() {
    let cfg = block_cfg(2);
    let p = perturbed_params(&cfg, 3);
    let bp = &p.blocks[0];
    let mut r = rng(5);
    let x = random(&[1, 4, 4], &mut r);

    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let xv = g.constant(x.clone());
    let (out, a_cls) = mhsa(&mut g, &cfg, &vars.blocks[0], xv).unwrap();
    let out = g.value(out).clone();

    let rows: Vec<&[f64]> = x.data().chunks(4).collect();
    let proj = |w: &Tensor<f64>, b: &Tensor<f64>, i: usize, j: usize| {
        b.data()[j] + (0..4).map(|t| rows[i][t] * w.at(&[t, j])).sum::<f64>()
    };
    let scale = 1.0 / 2f64.sqrt();
    let mut ctx = vec![[0.0; 4]; 4];
    let mut cls = [0.0; 4];
    for h in 0..2 {
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (0..2).map(|t| proj(&bp.wq, &bp.bq, i, 2 * h + t) * proj(&bp.wk, &bp.bk, j, 2 * h + t)).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let a: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            if i == 0 {
                for j in 0..4 {
                    cls[j] += a[j];
                }
            }
            for t in 0..2 {
                ctx[i][2 * h + t] = (0..4).map(|j| a[j] * proj(&bp.wv, &bp.bv, j, 2 * h + t)).sum();
            }
        }
    }
    for i in 0..4 {
        for j in 0..4 {
            let want = bp.bo.data()[j] + (0..4).map(|t| ctx[i][t] * bp.wo.at(&[t, j])).sum::<f64>();
            assert!((out.at(&[0, i, j]) - want).abs() < 1e-12);
        }
    }
    for j in 0..4 {
        assert!((a_cls.at(&[0, j]) - cls[j]).abs() < 1e-12);
    }
}

#[test]
fn single_token_attention_is_value_projection() {
    let cfg = block_cfg(1);
    let p = perturbed_params(&cfg, 4);
    let bp = &p.blocks[0];
    let x = Tensor::from_f64(&[1, 1, 4], &[0.3, -0.2, 0.9, 0.1]).unwrap();
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let xv = g.constant(x.clone());
    let (out, a_cls) = mhsa(&mut g, &cfg, &vars.blocks[0], xv).unwrap();
    assert_eq!(a_cls.data(), &[1.0]);
    let v = supervit::numerics::matmul(&x.clone().reshape(&[1, 4]).unwrap(), &bp.wv).unwrap();
    let v: Vec<f64> = v.data().iter().zip(bp.bv.data()).map(|(a, b)| a + b).collect();
    for j in 0..4 {
        let want = bp.bo.data()[j] + (0..4).map(|t| v[t] * bp.wo.at(&[t, j])).sum::<f64>();
        assert!((g.value(out).data()[j] - want).abs() < 1e-12);
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let cfg = block_cfg(2);
    let p = perturbed_params(&cfg, 6);
    let x = Tensor::from_fn(&[2, 5, 4], |i| [0.4, -1.0, 0.2, 0.7][i % 4]);
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let xv = g.constant(x);
    let (_, a_cls) = mhsa(&mut g, &cfg, &vars.blocks[0], xv).unwrap();
    for &a in a_cls.data() {
        assert!((a - 2.0 / 5.0).abs() < 1e-12);
    }
}

#[test]
fn class_attention_is_nonnegative_and_sums_to_heads() {
    let cfg = ModelConfig { depth: 3, drop_blocks: vec![2], ..tiny() };
    let p = perturbed_params(&cfg, 8);
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let out = forward(&mut g, &cfg, &vars, &images(&cfg, 3, 1), SubnetConfig::new(1, 1)).unwrap();
    assert_eq!(out.trace.attention.len(), cfg.depth);
    for a in &out.trace.attention {
        for row in a.data().chunks(a.shape()[1]) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - cfg.heads as f64).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_output_projections_make_block_identity() {
    let cfg = block_cfg(2);
    let mut p = perturbed_params(&cfg, 7);
    let b = &mut p.blocks[0];
    for t in [&mut b.wo, &mut b.bo, &mut b.fc2_w, &mut b.fc2_b] {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    for n in [1, 3, 6] {
        let x = random(&[2, n, 4], &mut rng(n as u64));
        let mut g = Graph::new();
        let vars = p.register_frozen(&mut g);
        let tb = tokens(&mut g, x.clone());
        let out = encoder_block(&mut g, &cfg, &vars.blocks[0], tb, None).unwrap();
        assert_eq!(g.value(out.tokens), &x);
    }
}

#[test]
fn two_blocks_gradient_matches_finite_differences() {
    let cfg = block_cfg(2);
    for seed in 0..5 {
        let p = perturbed_params(&cfg, seed);
        let x = random(&[2, 3, 4], &mut rng(seed + 50));
        let mut leaves: Vec<Tensor<f64>> = vec![x];
        for b in &p.blocks {
            leaves.extend([b.wq.clone(), b.norm1_gamma.clone(), b.fc1_w.clone(), b.fc2_b.clone()]);
        }
        let err = gradcheck(&leaves, |g, v| {
            let mut vars = p.register_frozen(g);
            for (i, b) in vars.blocks.iter_mut().enumerate() {
                b.wq = v[1 + 4 * i];
                b.norm1_gamma = v[2 + 4 * i];
                b.fc1_w = v[3 + 4 * i];
                b.fc2_b = v[4 + 4 * i];
            }
            let mut tb = TokenBatch { tokens: v[0], kept_index: vec![vec![0, 1, 2]; 2], attention: vec![] };
            for b in &vars.blocks {
                tb = encoder_block(g, &cfg, b, tb, None).unwrap();
            }
            common::weighted_sum(g, tb.tokens, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

/// Parameter handles bound to the given tape leaves, in canonical order.
fn bind_all(p: &ModelParams<f64>, leaves: &[Var]) -> supervit::model::ParamVars {
    let mut it = leaves.iter().copied();
    p.map(|_, _| it.next().unwrap())
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let cfg = tiny();
    for seed in 0..5 {
        let p = perturbed_params(&cfg, 20 + seed);
        let imgs = images(&cfg, 2, seed);
        let leaves: Vec<Tensor<f64>> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        for sc in [SubnetConfig::new(1, 0), SubnetConfig::new(0, 1), SubnetConfig::new(1, 1)] {
            let err = gradcheck(&leaves, |g, v| {
                let vars = bind_all(&p, v);
                let out = forward(g, &cfg, &vars, &imgs, sc).unwrap();
                g.cross_entropy(out.probs, &[2, 0]).unwrap()
            });
            assert!(err < 1e-4, "seed {seed} {sc:?}: {err:e}");
        }
    }
}

#[test]
fn permuting_patches_leaves_class_prediction_unchanged() {
    let cfg = tiny();
    let p = perturbed_params(&cfg, 30);
    let grid = 1;
    let n = cfg.patch_tokens(grid);
    let feats = aligned_patch_features(&images(&cfg, 2, 31), cfg.grids[grid], cfg.base_patch).unwrap();
    let f = feats.shape()[2];

    let mut perm: Vec<usize> = (0..n).collect();
    perm.reverse();
    perm.swap(0, 5);
    let mut pf = Vec::with_capacity(feats.len());
    for b in 0..2 {
        for &src in &perm {
            pf.extend_from_slice(&feats.data()[(b * n + src) * f..(b * n + src + 1) * f]);
        }
    }
    let permuted_feats = Tensor::new(feats.shape().to_vec(), pf).unwrap();
    let mut q = p.clone();
    let d = cfg.dim;
    let pos = &p.pos[grid];
    let mut rows = pos.data()[..d].to_vec();
    for &src in &perm {
        rows.extend_from_slice(&pos.data()[(src + 1) * d..(src + 2) * d]);
    }
    q.pos[grid] = Tensor::new(pos.shape().to_vec(), rows).unwrap();

    for rate in 0..cfg.num_rates() {
        let sc = SubnetConfig::new(grid, rate);
        let run = |params: &ModelParams<f64>, feats: &Tensor<f64>| {
            let mut g = Graph::new();
            let vars = params.register_frozen(&mut g);
            let out = forward_features(&mut g, &cfg, &vars, feats, sc).unwrap();
            g.value(out.logits).clone()
        };
        let a = run(&p, &feats);
        let b = run(&q, &permuted_feats);
        assert!(a.max_abs_diff(&b) < 1e-12, "rate index {rate}");
    }
}

#[test]
fn token_trajectory_for_fourteen_grid_at_half_rate() {
    let cfg = ModelConfig {
        depth: 12,
        dim: 4,
        heads: 2,
        ffn_dim: 4,
        num_classes: 2,
        image_side: 28,
        channels: 1,
        grids: vec![14],
        base_patch: 2,
        keep_rates: vec![1.0, 0.5],
        drop_blocks: vec![4, 7, 10],
        ..ModelConfig::toy()
    };
    let p = ModelParams::<f64>::init(&cfg, 0);
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let out = forward(&mut g, &cfg, &vars, &images(&cfg, 2, 0), SubnetConfig::new(0, 1)).unwrap();
    let after: Vec<usize> = out.token_counts.iter().map(|c| c.1).collect();
    assert_eq!(after, vec![197, 197, 197, 99, 99, 99, 50, 50, 50, 26, 26, 26]);
    assert_eq!(out.token_counts[3], (197, 99));
    for kept in &out.trace.kept_index {
        assert_eq!(kept[0], 0);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn lower_rates_never_keep_more_tokens() {
    let cfg = ModelConfig { keep_rates: vec![1.0, 0.7, 0.5], drop_blocks: vec![1, 2], ..tiny() };
    let p = perturbed_params(&cfg, 9);
    let imgs = images(&cfg, 1, 9);
    for grid in 0..cfg.num_grids() {
        let traj: Vec<Vec<usize>> = (0..cfg.num_rates())
            .map(|m| {
                let mut g = Graph::new();
                let vars = p.register_frozen(&mut g);
                let out = forward(&mut g, &cfg, &vars, &imgs, SubnetConfig::new(grid, m)).unwrap();
                out.token_counts.iter().flat_map(|&(a, b)| [a, b]).collect()
            })
            .collect();
        for w in traj.windows(2) {
            assert!(w[1].iter().zip(&w[0]).all(|(lo, hi)| lo <= hi));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny();
    let imgs = images(&cfg, 3, 2);
    let a = probs_of(&cfg, &ModelParams::init(&cfg, 42), &imgs, SubnetConfig::new(1, 1));
    let b = probs_of(&cfg, &ModelParams::init(&cfg, 42), &imgs, SubnetConfig::new(1, 1));
    assert_eq!(a.data(), b.data());
}

#[test]
fn embedding_examples() {
    let cfg = tiny();
    let mut p = perturbed_params(&cfg, 11);
    p.pos.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let zeros = Tensor::zeros(&[1, 8, 8, 2]);
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    for grid in 0..2 {
        let tb = supervit::model::align_and_embed(&mut g, &cfg, &vars, &zeros, grid).unwrap();
        let v = g.value(tb.tokens);
        assert_eq!(v.shape(), &[1, cfg.patch_tokens(grid) + 1, cfg.dim]);
        assert_eq!(&v.data()[..cfg.dim], p.cls_token.data());
        for tok in v.data()[cfg.dim..].chunks(cfg.dim) {
            assert_eq!(tok, p.patch_b.data());
        }
    }
    assert!(supervit::model::align_and_embed(&mut g, &cfg, &vars, &zeros, 2).is_err());
}

#[test]
fn embedding_without_resize_is_direct_projection() {
    let cfg = ModelConfig { base_patch: 4, ..tiny() };
    let p = perturbed_params(&cfg, 12);
    let imgs = images(&cfg, 1, 12);
    let feats = aligned_patch_features(&imgs, 2, 4).unwrap();
    let patches = supervit::model::split_patches(&imgs, 2).unwrap();
    assert_eq!(feats.data(), patches.data());
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let tb = embed_features(&mut g, &vars, &feats, 0).unwrap();
    let direct = supervit::numerics::matmul(&patches.reshape(&[4, 32]).unwrap(), &p.patch_w).unwrap();
    let v = g.value(tb.tokens);
    for i in 0..4 {
        for j in 0..cfg.dim {
            let want = direct.at(&[i, j]) + p.patch_b.data()[j] + p.pos[0].at(&[i + 1, j]);
            assert!((v.at(&[0, i + 1, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn prune_with_full_rate_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = random(&[2, 5, 3], &mut rng(1));
    let tb = tokens(&mut g, x);
    let before = (tb.tokens, tb.kept_index.clone());
    let scores = random(&[2, 5], &mut rng(2));
    let tb = prune_tokens(&mut g, tb, &scores, 1.0, Default::default()).unwrap();
    assert_eq!((tb.tokens, tb.kept_index), before);
}

#[test]
fn prune_composes_original_indices() {
    let mut g = Graph::<f64>::new();
    let x = Tensor::from_fn(&[1, 5, 1], |i| i as f64);
    let mut tb = tokens(&mut g, x);
    tb.kept_index = vec![vec![0, 3, 7, 8, 11]];
    let scores = Tensor::from_f64(&[1, 5], &[0.0, 0.1, 0.4, 0.2, 0.3]).unwrap();
    let tb = prune_tokens(&mut g, tb, &scores, 0.5, Default::default()).unwrap();
    assert_eq!(tb.kept_index, vec![vec![0, 7, 11]]);
    assert_eq!(g.value(tb.tokens).data(), &[0.0, 2.0, 4.0]);
}

#[test]
fn rejects_invalid_inputs_before_compute() {
    let cfg = tiny();
    let p = ModelParams::<f64>::init(&cfg, 0);
    let mut g = Graph::new();
    let vars = p.register_frozen(&mut g);
    let imgs = images(&cfg, 1, 0);
    assert!(forward(&mut g, &cfg, &vars, &imgs, SubnetConfig::new(2, 0)).is_err());
    assert!(forward(&mut g, &cfg, &vars, &imgs, SubnetConfig::new(0, 2)).is_err());
    let wrong = Tensor::zeros(&[1, 6, 6, 2]);
    assert!(forward(&mut g, &cfg, &vars, &wrong, SubnetConfig::new(0, 0)).is_err());
    let bad = ModelConfig { heads: 3, ..cfg };
    assert!(forward(&mut g, &bad, &vars, &imgs, SubnetConfig::new(0, 0)).is_err());
}
