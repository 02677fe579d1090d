use std::time::Duration;

use proptest::prelude::*;
use supervit::model::{count_parameters, kept_count, ModelConfig, SubnetConfig, SubnetLabel};
use supervit::profiler::{cost_table, model_macs, throughput_bench, token_trajectory};

fn gmacs(cfg: &ModelConfig, grid: usize, rate: f64) -> f64 {
    let sc = cfg.find(SubnetLabel { grid, rate }).unwrap();
    model_macs(cfg, sc).unwrap().gmacs()
}

/// Reference GMACs of every 4/7/10 subnet of the small backbone.
const TABLE: [(usize, [f64; 3]); 4] = [(14, [4.6, 3.0, 2.3]), (12, [3.3, 2.2, 1.7]), (10, [2.3, 1.5, 1.2]), (8, [1.4, 1.0, 0.7])];

#[test]
fn small_backbone_matches_reference_table() {
    let cfg = ModelConfig::deit_small();
    for (grid, row) in TABLE {
        for (rate, want) in [1.0, 0.7, 0.5].into_iter().zip(row) {
            let got = gmacs(&cfg, grid, rate);
            let tol = if rate == 1.0 { 0.03 } else { 0.07 };
            assert!(((got - want) / want).abs() <= tol, "{grid}x{grid}@{rate}: {got} vs {want}");
        }
    }
}

#[test]
fn earlier_drop_blocks_match_ablation() {
    let cfg = ModelConfig {
        drop_blocks: vec![3, 6, 9],
        ..ModelConfig::deit_small()
    };
    for (rate, want) in [(0.5, 2.0), (0.7, 2.8)] {
        let got = gmacs(&cfg, 14, rate);
        assert!(((got - want) / want).abs() <= 0.07, "@{rate}: {got} vs {want}");
    }
}

/// Straight-line recount of the small backbone at 14x14, rate 0.5.
#[test]
fn hand_count_of_pruned_subnet() {
    let (d, dff, k) = (384u64, 1536u64, 1000u64);
    let embed = 196 * 16 * 16 * 3 * d;
    let mut n = 197u64;
    let mut blocks = 0;
    for l in 1..=12 {
        blocks += 4 * n * d * d + 2 * n * n * d;
        if [4, 7, 10].contains(&l) {
            n = 1 + (n - 1).div_ceil(2);
        }
        blocks += 2 * n * d * dff;
    }
    let cfg = ModelConfig::deit_small();
    let report = model_macs(&cfg, cfg.find(SubnetLabel { grid: 14, rate: 0.5 }).unwrap()).unwrap();
    assert_eq!(report.total_macs, embed + blocks + d * k);
    assert_eq!(report.parameters, count_parameters(&cfg));
}

#[test]
fn cost_orders_by_grid_and_rate() {
    for cfg in [ModelConfig::deit_small(), ModelConfig::deit_tiny(), ModelConfig::toy()] {
        let macs = |g, m| model_macs(&cfg, SubnetConfig::new(g, m)).unwrap().total_macs;
        for m in 0..cfg.num_rates() {
            for g in 1..cfg.num_grids() {
                assert!(macs(g, m) > macs(g - 1, m));
            }
        }
        for g in 0..cfg.num_grids() {
            for m in 1..cfg.num_rates() {
                assert!(macs(g, m) < macs(g, m - 1));
            }
        }
        assert_eq!(cost_table(&cfg).unwrap().len(), cfg.num_grids() * cfg.num_rates());
    }
}

#[test]
fn sleep_stub_throughput() {
    let report = throughput_bench(32, 20, || {
        std::thread::sleep(Duration::from_millis(10));
        Ok(())
    })
    .unwrap();
    let want = 3200.0;
    assert!((report.images_per_second - want).abs() / want < 0.2, "{report:?}");
}

#[test]
fn faster_stub_ranks_higher() {
    let time = |ms| {
        throughput_bench(8, 5, || {
            std::thread::sleep(Duration::from_millis(ms));
            Ok(())
        })
        .unwrap()
        .images_per_second
    };
    assert!(time(2) > time(8));
}

#[test]
fn bench_rejects_empty_runs() {
    assert!(throughput_bench(0, 3, || Ok(())).is_err());
    assert!(throughput_bench(3, 0, || Ok(())).is_err());
}

fn arb_model() -> impl Strategy<Value = ModelConfig> {
    (1usize..=12, 1usize..=4, 1usize..=8, prop::collection::btree_set(2usize..16, 1..4), 1usize..5).prop_flat_map(
        |(depth, heads, head_dim, grids, ffn_mult)| {
            let grids: Vec<usize> = grids.into_iter().collect();
            (
                Just(depth),
                prop::collection::btree_set(1..=depth, 1..=depth.min(3)),
                prop::collection::vec(0.05f64..0.99, 0..3),
            )
                .prop_map(move |(depth, drops, rates)| {
                    let mut keep_rates = vec![1.0];
                    let mut rates = rates;
                    rates.sort_by(|a, b| b.total_cmp(a));
                    rates.dedup();
                    keep_rates.extend(rates);
                    let dim = heads * head_dim;
                    ModelConfig {
                        depth,
                        dim,
                        heads,
                        ffn_dim: dim * ffn_mult,
                        num_classes: 10,
                        image_side: 2 * grids.last().unwrap(),
                        channels: 3,
                        grids: grids.clone(),
                        base_patch: 2,
                        keep_rates,
                        drop_blocks: drops.into_iter().collect(),
                        ..ModelConfig::toy()
                    }
                })
        },
    )
}

proptest! {
    #[test]
    fn components_add_up(cfg in arb_model()) {
        for report in cost_table(&cfg).unwrap() {
            let c = report.components;
            prop_assert_eq!(c.embedding + c.mhsa + c.ffn + c.head, report.total_macs);
            let layers_mhsa: u64 = report.layers.iter().map(|l| l.mhsa_macs).sum();
            let layers_ffn: u64 = report.layers.iter().map(|l| l.ffn_macs).sum();
            prop_assert_eq!(layers_mhsa, c.mhsa);
            prop_assert_eq!(layers_ffn, c.ffn);
        }
    }

    #[test]
    fn trajectory_shrinks_only_at_drop_blocks(cfg in arb_model()) {
        for sc in cfg.subnets() {
            let t = token_trajectory(&cfg, sc);
            let rate = cfg.keep_rates[sc.rate];
            let mut n = cfg.patch_tokens(sc.grid) + 1;
            for (l, &(before, after)) in t.iter().enumerate() {
                prop_assert_eq!(before, n);
                if rate < 1.0 && cfg.drop_blocks.contains(&(l + 1)) {
                    n = 1 + kept_count(n - 1, rate);
                }
                prop_assert_eq!(after, n);
            }
        }
    }
}
