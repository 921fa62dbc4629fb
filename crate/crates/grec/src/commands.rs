//! Command implementations behind the `grec` binary: train, eval,
//! sweep, compare-routing, dump-routing.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops::{
    count_mmoe_flops, count_model_flops, BatchProfile, CostModel, ModelDims,
};
use crate::model::{GrecModel, MmoeModel};
use crate::moe::Granularity;
use crate::trainer::{evaluate, train, EpochRow, TrainConfig};

fn fmt6(v: f64) -> String {
    format!("{:.6}", v)
}

fn effective_train_cfg(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    }
}

fn write_metrics_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch,task,auc,ap,loss\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.task,
            fmt6(r.auc),
            fmt6(r.ap),
            fmt6(r.loss)
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn model_dims(cfg: &ExperimentConfig) -> Result<ModelDims> {
    Ok(ModelDims {
        d: cfg.model.d as u64,
        heads: cfg.model.transformer.heads as u64,
        d_head: cfg.model.transformer.head_width(cfg.model.d)? as u64,
        mlp_hidden: cfg.model.transformer.mlp_hidden as u64,
        blocks: cfg.model.transformer.blocks as u64,
        mode: cfg.model.transformer.mode,
        expert_hidden: cfg.model.moe.expert_hidden as u64,
        experts: cfg.model.moe.experts as u64,
        k: cfg.model.moe.k as u64,
    })
}

/// Profile and sequence lengths for the first training batch; used as
/// the FLOPs reference batch.
fn reference_batch(ds: &Dataset, batch_size: usize) -> (BatchProfile, Vec<u64>) {
    let n = batch_size.max(1).min(ds.len());
    let examples = &ds.examples[..n];
    let mut seq_lens = Vec::new();
    for ex in examples {
        for (field, sf) in ds.schema.sequences.iter().enumerate() {
            seq_lens.push(ex.sequences[field].len.min(sf.max_len) as u64);
        }
    }
    (BatchProfile::from_examples(examples), seq_lens)
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.data.load()?;
    let (train_ds, test_ds) = ds.split_by_time(cfg.data.test_fraction);
    let model = GrecModel::new(&ds.schema, &ds.vocab, &cfg.model, cfg.seed)?;
    let history = train(&model, &train_ds, &test_ds, &effective_train_cfg(cfg))?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &history)?;
    model.save(&cfg.out_dir.join("model.ckpt"))?;
    let last_epoch = history.iter().map(|r| r.epoch).max().unwrap_or(0);
    println!("trained {} epochs on {} examples ({} test)", cfg.train.epochs, train_ds.len(), test_ds.len());
    for r in history.iter().filter(|r| r.epoch == last_epoch) {
        println!(
            "epoch {} {}: auc={} ap={} loss={}",
            r.epoch,
            r.task,
            fmt6(r.auc),
            fmt6(r.ap),
            fmt6(r.loss)
        );
    }
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = cfg.out_dir.join("model.ckpt");
    if !ckpt.exists() {
        return Err(Error::Config(format!(
            "no checkpoint at {} (run train first)",
            ckpt.display()
        )));
    }
    let ds = cfg.data.load()?;
    let (_, test_ds) = ds.split_by_time(cfg.data.test_fraction);
    let mut model = GrecModel::new(&ds.schema, &ds.vocab, &cfg.model, cfg.seed)?;
    model.load_params(&ckpt)?;
    let rows = evaluate(&model, &test_ds, cfg.train.batch_size, 0)?;
    write_metrics_csv(&cfg.out_dir.join("eval.csv"), &rows)?;
    for r in &rows {
        println!("{}: auc={} ap={} loss={}", r.task, fmt6(r.auc), fmt6(r.ap), fmt6(r.loss));
    }
    Ok(())
}

struct SweepCell {
    experts: usize,
    k: usize,
    granularity: Granularity,
    seed: u64,
}

pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let ds = cfg.data.load()?;
    let (train_ds, test_ds) = ds.split_by_time(cfg.data.test_fraction);
    let mut cells = Vec::new();
    for &g in &cfg.sweep.granularities {
        for &e in &cfg.sweep.experts {
            for &k in &cfg.sweep.k {
                if k > e {
                    continue;
                }
                for &seed in &cfg.sweep.seeds {
                    cells.push(SweepCell {
                        experts: e,
                        k,
                        granularity: g,
                        seed,
                    });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("sweep grid is empty (every k exceeds every expert count)".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {}", e)))?;
    let results: Vec<Result<Vec<String>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let mut model_cfg = cfg.model.clone();
                model_cfg.moe.experts = cell.experts;
                model_cfg.moe.k = cell.k;
                model_cfg.moe.granularity = cell.granularity;
                let model = GrecModel::new(&ds.schema, &ds.vocab, &model_cfg, cell.seed)?;
                let train_cfg = TrainConfig {
                    seed: cell.seed,
                    ..cfg.train.clone()
                };
                let history = train(&model, &train_ds, &test_ds, &train_cfg)?;
                let last_epoch = history.iter().map(|r| r.epoch).max().unwrap_or(0);
                let (profile, seq_lens) = reference_batch(&train_ds, cfg.train.batch_size);
                let mut dims = model_dims(cfg)?;
                dims.experts = cell.experts as u64;
                dims.k = cell.k as u64;
                let flops = count_model_flops(
                    cell.granularity,
                    &profile,
                    &seq_lens,
                    &dims,
                    &CostModel::default(),
                )?;
                let mut rows = Vec::new();
                for r in history.iter().filter(|r| r.epoch == last_epoch) {
                    rows.push(format!(
                        "{},{},{},{},{},{},{}",
                        cell.experts,
                        cell.k,
                        cell.granularity.label(),
                        cell.seed,
                        r.task,
                        fmt6(r.auc),
                        flops.model_total()
                    ));
                }
                Ok(rows)
            })
            .collect()
    });
    let mut out = String::from("experts,k,granularity,seed,task,auc,model_flops\n");
    for r in results {
        for line in r? {
            out.push_str(&line);
            out.push('\n');
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("sweep.csv"), &out)?;
    print!("{}", out);
    Ok(())
}

/// Table-shaped routing comparison: the four granularities plus the
/// dense MMoE baseline, trained on identical data and seed.
pub fn cmd_compare_routing(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let ds = cfg.data.load()?;
    let (train_ds, test_ds) = ds.split_by_time(cfg.data.test_fraction);
    let (profile, _) = reference_batch(&train_ds, cfg.train.batch_size);
    let dims = model_dims(cfg)?;
    let train_cfg = effective_train_cfg(cfg);

    enum System {
        Sparse(Granularity),
        Mmoe,
    }
    let systems = [
        System::Sparse(Granularity::Token),
        System::Sparse(Granularity::Sentence),
        System::Sparse(Granularity::Task),
        System::Sparse(Granularity::TaskSentence),
        System::Mmoe,
    ];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {}", e)))?;
    let results: Vec<Result<(String, u128, Vec<f64>)>> = pool.install(|| {
        systems
            .par_iter()
            .map(|system| {
                let (name, routing_flops, history) = match system {
                    System::Sparse(g) => {
                        let mut model_cfg = cfg.model.clone();
                        model_cfg.moe.granularity = *g;
                        let model = GrecModel::new(&ds.schema, &ds.vocab, &model_cfg, cfg.seed)?;
                        let history = train(&model, &train_ds, &test_ds, &train_cfg)?;
                        let mut dims = dims.clone();
                        dims.experts = cfg.model.moe.experts as u64;
                        let flops = count_model_flops(
                            *g,
                            &profile,
                            &[],
                            &dims,
                            &CostModel::default(),
                        )?;
                        (g.label().to_string(), flops.routing_total(), history)
                    }
                    System::Mmoe => {
                        let model = MmoeModel::new(&ds.schema, &ds.vocab, &cfg.model, cfg.seed)?;
                        let history = train(&model, &train_ds, &test_ds, &train_cfg)?;
                        let flops = count_mmoe_flops(
                            profile.tokens,
                            ds.vocab.use_cases.len() as u64,
                            dims.d,
                            dims.experts,
                            dims.expert_hidden,
                        );
                        ("mmoe".to_string(), flops.routing_total(), history)
                    }
                };
                let last_epoch = history.iter().map(|r| r.epoch).max().unwrap_or(0);
                let aps: Vec<f64> = history
                    .iter()
                    .filter(|r| r.epoch == last_epoch)
                    .map(|r| r.ap)
                    .collect();
                Ok((name, routing_flops, aps))
            })
            .collect()
    });
    let mut out = String::from("system,routing_flops");
    for uc in &ds.vocab.use_cases {
        out.push_str(&format!(",ap_{}", uc));
    }
    out.push('\n');
    for r in results {
        let (name, flops, aps) = r?;
        out.push_str(&format!("{},{}", name, flops));
        for ap in aps {
            out.push_str(&format!(",{}", fmt6(ap)));
        }
        out.push('\n');
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("compare_routing.csv"), &out)?;
    print!("{}", out);
    Ok(())
}

/// Print the routing decision for one reference batch. Loads the
/// checkpoint from the output directory when present, otherwise uses a
/// freshly initialized model.
pub fn cmd_dump_routing(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.data.load()?;
    let (train_ds, _) = ds.split_by_time(cfg.data.test_fraction);
    let mut model = GrecModel::new(&ds.schema, &ds.vocab, &cfg.model, cfg.seed)?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    if ckpt.exists() {
        model.load_params(&ckpt)?;
    }
    let n = cfg.train.batch_size.max(1).min(train_ds.len());
    let pred = model.predict(&train_ds.examples[..n])?;
    let dump = pred.routing.dump();
    fs::create_dir_all(&cfg.out_dir)?;
    let mut f = fs::File::create(cfg.out_dir.join("routing.txt"))?;
    f.write_all(dump.as_bytes())?;
    print!("{}", dump);
    Ok(())
}
