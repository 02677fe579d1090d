use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::json;
use supervit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use supervit::data::Dataset;
use supervit::model::{aligned_patch_features, forward_features, ModelConfig, ModelParams, SubnetConfig, SubnetLabel};
use supervit::numerics::{Graph, Real, Tensor};
use supervit::profiler::{model_macs, throughput_bench, CostReport, ThroughputReport};
use supervit::run_config::{hash_json, RunConfig};
use supervit::scheduler::{
    select_for_budget, sweep_threshold, BudgetPolicy, CascadePolicy, SubnetTable, TableEntry,
};
use supervit::training::{predict, EpochRecord, Precision, Trainer};
use supervit::Error;

use crate::format::{cascade_csv, cost_csv, eval_csv};
use crate::{Backbone, CliError, Command};

pub(crate) fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train { config } => train(&config, out),
        Command::Eval {
            config,
            checkpoint,
            grid,
            rate,
            all,
            tables_out,
        } => eval(&config, &checkpoint, grid.zip(rate), all, tables_out.as_deref(), out),
        Command::Profile {
            config,
            paper_dims,
            backbone,
            drop_blocks,
            table,
            bench_repeats,
            bench_batch,
        } => {
            let (mut model, config_hash) = match (config, paper_dims) {
                (_, true) => match backbone {
                    Backbone::DeitS => (ModelConfig::deit_small(), None),
                    Backbone::DeitT => (ModelConfig::deit_tiny(), None),
                },
                (Some(path), false) => {
                    let rc = RunConfig::load(&path)?;
                    let hash = rc.hash();
                    (rc.model, Some(hash))
                }
                (None, false) => return Err(CliError::Usage("profile needs --config or --paper-dims".into())),
            };
            // an override describes a different model than the config file
            let hash = match (drop_blocks, config_hash) {
                (Some(blocks), _) => {
                    model.drop_blocks = blocks;
                    hash_json(&model)
                }
                (None, Some(h)) => h,
                (None, None) => hash_json(&model),
            };
            profile(&model, &hash, table, bench_repeats, bench_batch, out)
        }
        Command::Cascade {
            config,
            checkpoint,
            sweep,
            stages,
        } => cascade(&config, &checkpoint, &sweep, stages.as_deref(), out),
        Command::Select { budget, tables } => select(budget, &tables, out),
    }
}

fn write_json(out: &mut dyn Write, value: &serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{}", serde_json::to_string_pretty(value).expect("json values serialise"))?;
    Ok(())
}

fn train(config: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let rc = RunConfig::load(config)?;
    let (train_data, val_data) = rc.load_data()?;
    let dir = rc.resolve(&rc.output_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let last = match rc.train.precision {
        Precision::F32 => train_with::<f32>(&rc, &train_data, &val_data)?,
        Precision::F64 => train_with::<f64>(&rc, &train_data, &val_data)?,
    };
    let accuracy: serde_json::Map<String, serde_json::Value> = last
        .iter()
        .filter_map(|r| r.accuracy.map(|a| (r.subnet.clone(), json!(a))))
        .collect();
    write_json(
        out,
        &json!({
            "config_hash": rc.hash(),
            "epochs": rc.train.epochs,
            "metrics": rc.output_path("metrics.jsonl"),
            "checkpoint": rc.output_path("final.ckpt"),
            "final_accuracy": accuracy,
        }),
    )
}

/// Trains and returns the last epoch's records.
fn train_with<T: Real>(rc: &RunConfig, train_data: &Dataset, val_data: &Dataset) -> Result<Vec<EpochRecord>, Error> {
    let hash = rc.hash();
    let mut trainer = Trainer::<T>::new(rc.model.clone(), rc.train.clone())?.with_config_hash(hash.clone());
    let metrics_path = rc.output_path("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
    let mut metrics = BufWriter::new(file);
    let io = |e| Error::Io { path: metrics_path.clone(), source: e };
    let mut last = Vec::new();
    while trainer.epoch() < rc.train.epochs {
        let records = trainer.run_epoch(train_data, Some(val_data))?;
        for r in &records {
            let line = serde_json::to_string(r).expect("records serialise");
            writeln!(metrics, "{line}").map_err(io)?;
        }
        metrics.flush().map_err(io)?;
        save_checkpoint(&rc.output_path("latest.ckpt"), &rc.model, trainer.params(), Some(&hash))?;
        last = records;
    }
    save_checkpoint(&rc.output_path("final.ckpt"), &rc.model, trainer.params(), Some(&hash))?;
    Ok(last)
}

/// Config, checkpoint parameters and validation data for the inference
/// commands.
fn load_trained(config: &Path, checkpoint: &Path) -> Result<(RunConfig, Checkpoint, Dataset), Error> {
    let rc = RunConfig::load(config)?;
    let ckpt = load_checkpoint(checkpoint)?;
    if ckpt.model != rc.model {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            checkpoint.display()
        )));
    }
    let (_, val) = rc.load_data()?;
    Ok((rc, ckpt, val))
}

fn find_subnet(model: &ModelConfig, label: SubnetLabel) -> Result<SubnetConfig, Error> {
    model
        .find(label)
        .ok_or_else(|| Error::Config(format!("subnet {label} is not part of the supernet")))
}

fn eval(
    config: &Path,
    checkpoint: &Path,
    single: Option<(usize, f64)>,
    all: bool,
    tables_out: Option<&Path>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (rc, ckpt, val) = load_trained(config, checkpoint)?;
    let subnets: Vec<SubnetConfig> = match (single, all) {
        (Some((grid, rate)), false) => vec![find_subnet(&rc.model, SubnetLabel { grid, rate })?],
        (None, true) => rc.model.subnets().collect(),
        _ => return Err(CliError::Usage("eval needs either --grid and --rate, or --all".into())),
    };
    let mut entries = Vec::with_capacity(subnets.len());
    for sc in subnets {
        let label = rc.model.label(sc);
        entries.push(TableEntry {
            grid: label.grid,
            rate: label.rate,
            accuracy: predict(&rc.model, &ckpt.params, &val, sc, rc.train.batch_size)?.accuracy(),
            macs: model_macs(&rc.model, sc)?.total_macs,
        });
    }
    let table = SubnetTable {
        config_hash: Some(rc.hash()),
        entries,
    };
    if let Some(path) = tables_out {
        let text = serde_json::to_string_pretty(&table).expect("tables serialise");
        fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    }
    write!(out, "{}", eval_csv(&table))?;
    Ok(())
}

/// Deterministic pseudo-image values in [0, 1).
fn bench_values(n: usize) -> Vec<f32> {
    (0..n).map(|i| (i as f32 * 0.618_034).fract()).collect()
}

fn bench_subnet(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    sc: SubnetConfig,
    batch: usize,
    repeats: usize,
) -> Result<ThroughputReport, Error> {
    // full images when every grid divides the input, pre-aligned features
    // otherwise
    let images = cfg.validate().is_ok();
    let input = if images {
        let (s, c) = (cfg.image_side, cfg.channels);
        Tensor::new(vec![batch, s, s, c], bench_values(batch * s * s * c))?
    } else {
        let (n, f) = (cfg.patch_tokens(sc.grid), cfg.patch_features());
        Tensor::new(vec![batch, n, f], bench_values(batch * n * f))?
    };
    throughput_bench(batch, repeats, || {
        let mut g = Graph::new();
        let vars = params.register_frozen(&mut g);
        if images {
            let features = aligned_patch_features(&input, cfg.grids[sc.grid], cfg.base_patch)?;
            forward_features(&mut g, cfg, &vars, &features, sc)?;
        } else {
            forward_features(&mut g, cfg, &vars, &input, sc)?;
        }
        Ok(())
    })
}

fn profile(
    model: &ModelConfig,
    hash: &str,
    table: bool,
    bench_repeats: usize,
    bench_batch: usize,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    model.validate_architecture()?;
    let params = (bench_repeats > 0).then(|| ModelParams::<f32>::init(model, 0));
    let mut rows: Vec<(CostReport, Option<ThroughputReport>)> = Vec::new();
    for sc in model.subnets() {
        let report = model_macs(model, sc)?;
        let tput = match &params {
            Some(p) => Some(bench_subnet(model, p, sc, bench_batch, bench_repeats)?),
            None => None,
        };
        rows.push((report, tput));
    }
    if table {
        write!(out, "{}", cost_csv(hash, &rows))?;
        return Ok(());
    }
    let reports: Vec<_> = rows
        .iter()
        .map(|(r, t)| {
            let mut v = serde_json::to_value(r).expect("reports serialise");
            v["gmacs"] = json!(r.gmacs());
            v["throughput"] = serde_json::to_value(t).expect("reports serialise");
            v
        })
        .collect();
    write_json(out, &json!({ "config_hash": hash, "reports": reports }))
}

fn cascade(
    config: &Path,
    checkpoint: &Path,
    sweep: &[f64],
    stages: Option<&[String]>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (rc, ckpt, val) = load_trained(config, checkpoint)?;
    let policy = match stages {
        Some(names) => {
            let stages = names
                .iter()
                .map(|n| find_subnet(&rc.model, n.parse()?))
                .collect::<Result<Vec<_>, _>>()?;
            CascadePolicy::new(&rc.model, stages, 1.0)?
        }
        None => CascadePolicy::two_stage(&rc.model, 1.0)?,
    };
    let points = sweep_threshold(&rc.model, &ckpt.params, &val, &policy, sweep, rc.train.batch_size)?;
    write!(out, "{}", cascade_csv(&rc.hash(), &points))?;
    Ok(())
}

fn select(budget: f64, tables: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(CliError::Usage(format!("budget {budget} must be a non-negative number")));
    }
    let text = fs::read_to_string(tables).map_err(|e| Error::Io { path: tables.to_path_buf(), source: e })?;
    let table: SubnetTable = serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "subnet table",
        offset: 0,
        message: e.to_string(),
    })?;
    let budget_macs = (budget * 1e9).round() as u64;
    let label = select_for_budget(&BudgetPolicy::from_table(budget_macs, &table))?;
    let entry = table
        .entries
        .iter()
        .find(|e| e.grid == label.grid && (e.rate - label.rate).abs() < 1e-9)
        .expect("selected from the table");
    write_json(
        out,
        &json!({
            "config_hash": table.config_hash,
            "budget_gmacs": budget,
            "subnet": label.to_string(),
            "grid": entry.grid,
            "rate": entry.rate,
            "accuracy": entry.accuracy,
            "gmacs": entry.macs as f64 / 1e9,
        }),
    )
}
