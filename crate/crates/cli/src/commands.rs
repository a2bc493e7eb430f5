use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use fuxi::analysis::{machine_tag, scaling_probe, tps_benchmark, verify_degree_bound, ScalingAxis, SimplifiedBlockSpec};
use fuxi::autodiff::grad_check;
use fuxi::baselines::VariantKind;
use fuxi::checkpoint;
use fuxi::data::DatasetSplit;
use fuxi::metrics::{evaluate, records, write_csv, write_jsonl, MetricRecord, MetricsReport};
use fuxi::model::{ModelParams, SequenceBatch};
use fuxi::train::{sequence_loss, train_with_progress, EpochLog, SELECTION_K};
use fuxi::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::run::{create, write_file, RunError, RunResult};
use crate::Command;

pub const SPLIT_MANIFEST: &str = "split.manifest";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOSS: &str = "loss.csv";
pub const METRICS: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const TRAIN_SUMMARY: &str = "train.summary.json";
pub const BENCH: &str = "bench.csv";
pub const ANALYSIS: &str = "analysis.csv";
pub const GRADCHECK: &str = "gradcheck.txt";

/// Runs `command` and returns the names of the artifacts it wrote.
pub fn dispatch(command: Command, cfg: &RunConfig, split: Option<&DatasetSplit>, dir: &Path) -> RunResult<Vec<String>> {
    let split = || split.ok_or_else(|| RunError::Data("command needs a dataset".into()));
    let names: Vec<&str> = match command {
        Command::Ingest => ingest(split()?, cfg, dir)?,
        Command::Train => train_cmd(split()?, cfg, dir)?,
        Command::Eval => eval_cmd(split()?, cfg, dir)?,
        Command::Ablate => ablate(split()?, cfg, dir)?,
        Command::Bench => bench(split()?, cfg, dir)?,
        Command::Analyze => analyze(split()?, cfg, dir)?,
        Command::Gradcheck => gradcheck(cfg, dir)?,
    };
    Ok(names.into_iter().map(String::from).collect())
}

fn ingest(split: &DatasetSplit, cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let manifest = json!({
        "format": cfg.data.format,
        "path": cfg.data.path,
        "n": cfg.data.n,
        "users": split.stats.users,
        "items": split.stats.items,
        "interactions": split.stats.interactions,
        "mean_length": split.stats.mean_length,
        "vocab": split.vocab(),
        "dropped_users": split.dropped_users,
        "train": split.train.len(),
        "validation": split.validation.len(),
        "test": split.test.len(),
        "train_events": split.train.iter().map(|e| e.items.len()).sum::<usize>(),
    });
    write_file(dir, SPLIT_MANIFEST, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    println!(
        "{} users, {} items, {} interactions, mean length {:.2}",
        split.stats.users, split.stats.items, split.stats.interactions, split.stats.mean_length
    );
    Ok(vec![SPLIT_MANIFEST])
}

fn loss_row(log: &EpochLog) -> String {
    let val = log
        .validation
        .as_ref()
        .and_then(|r| r.ndcg_at(SELECTION_K))
        .map_or(String::new(), |v| v.to_string());
    format!("{},{},{},{}\n", log.epoch, log.mean_loss, log.positions, val)
}

fn train_cmd(split: &DatasetSplit, cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let (loss_path, mut loss) = create(dir, LOSS)?;
    writeln!(loss, "epoch,mean_loss,positions,val_ndcg@{SELECTION_K}").map_err(|e| RunError::io(&loss_path, e))?;
    let mut io_err = None;
    let outcome = train_with_progress(split, &cfg.model, &cfg.train, |log| {
        println!("epoch {:>3} loss {:.5}", log.epoch, log.mean_loss);
        if let Err(e) = loss.write_all(loss_row(log).as_bytes()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(RunError::io(&loss_path, e));
    }
    checkpoint::save(&dir.join(CHECKPOINT), &cfg.model, &outcome.params)?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "steps": outcome.steps,
    });
    write_file(dir, TRAIN_SUMMARY, summary.to_string() + "\n")?;
    println!("best epoch {}", outcome.best_epoch);
    Ok(vec![CHECKPOINT, LOSS, TRAIN_SUMMARY])
}

fn best_epoch(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join(TRAIN_SUMMARY))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| v["best_epoch"].as_u64())
        .map_or(0, |e| e as usize)
}

fn print_report(variant: VariantKind, report: &MetricsReport) {
    let mut line = format!("{variant:<9}");
    for (k, metric, value) in report.rows() {
        if k == 0 {
            let _ = write!(line, " {metric} {value:.4}");
        } else {
            let _ = write!(line, " {metric}@{k} {value:.4}");
        }
    }
    println!("{line}");
}

fn eval_cmd(split: &DatasetSplit, cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let path = dir.join(CHECKPOINT);
    if !path.is_file() {
        return Err(RunError::Data(format!("{} not found; run `train` first", path.display())));
    }
    let (model, params) = checkpoint::load(&path)?;
    if model.vocab != split.vocab() {
        return Err(RunError::Data(format!(
            "checkpoint vocabulary {} does not match the dataset ({})",
            model.vocab,
            split.vocab()
        )));
    }
    let report = evaluate(&params, &model, &split.test, &cfg.eval.ks, cfg.eval.batch_size)?;
    print_report(model.variant, &report);
    let rows = records(model.variant.as_str(), best_epoch(dir), &report);
    write_csv(&dir.join(METRICS), &rows)?;
    write_jsonl(&dir.join(METRICS_JSONL), &rows)?;
    Ok(vec![METRICS, METRICS_JSONL])
}

fn ablate(split: &DatasetSplit, cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let ks = &cfg.eval.ks;
    let mut csv = String::from("variant,best_epoch");
    for metric in ["hr", "ndcg"] {
        for k in ks {
            let _ = write!(csv, ",{metric}@{k}");
        }
    }
    csv.push_str(",mrr\n");
    let mut long: Vec<MetricRecord> = Vec::new();
    for variant in VariantKind::ABLATION {
        let model = ModelConfig { variant, ..cfg.model.clone() };
        let outcome = train_with_progress(split, &model, &cfg.train, |_| {})?;
        let report = evaluate(&outcome.params, &model, &split.test, ks, cfg.eval.batch_size)?;
        print_report(variant, &report);
        let _ = write!(csv, "{variant},{}", outcome.best_epoch);
        for table in [&report.hr, &report.ndcg] {
            for k in ks {
                let _ = write!(csv, ",{}", table[k]);
            }
        }
        let _ = writeln!(csv, ",{}", report.mrr);
        long.extend(records(variant.as_str(), outcome.best_epoch, &report));
    }
    write_file(dir, METRICS, csv)?;
    write_jsonl(&dir.join(METRICS_JSONL), &long)?;
    Ok(vec![METRICS, METRICS_JSONL])
}

fn bench(split: &DatasetSplit, cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let take = cfg.bench.sequences.min(split.train.len());
    let data = &split.train[..take];
    let machine = machine_tag();
    let mut csv = String::from("variant,seq_len,samples,seconds,tps,machine\n");
    for &variant in &cfg.bench.variants {
        let model = ModelConfig { variant, ..cfg.model.clone() };
        for r in tps_benchmark(&model, &cfg.bench.seq_lengths, cfg.bench.batch, data, cfg.train.seed)? {
            println!("{:<9} n={:<5} tps {:.3}", r.variant, r.seq_len, r.tps);
            let _ = writeln!(csv, "{},{},{},{},{},{machine}", r.variant, r.seq_len, r.samples, r.seconds, r.tps);
        }
    }
    write_file(dir, BENCH, csv)?;
    Ok(vec![BENCH])
}

fn analyze(split: &DatasetSplit, cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let a = &cfg.analysis;
    let mut csv = String::from("table,key,field,value\n");
    let mut all_hold = true;
    for &b in &a.layers {
        for &n in &a.lengths {
            let r = verify_degree_bound(&SimplifiedBlockSpec::generic(b, n))?;
            all_hold &= r.holds;
            println!(
                "degree b={b} n={n}: max cofactor degree {} (bound {}), divisible {}, holds {}",
                r.max_degree, r.bound, r.divisibility, r.holds
            );
            let key = format!("b={b};n={n}");
            for (field, value) in [
                ("bound", r.bound.to_string()),
                ("max_degree", r.max_degree.to_string()),
                ("divisibility", r.divisibility.to_string()),
                ("attained", r.attained.to_string()),
                ("holds", r.holds.to_string()),
            ] {
                let _ = writeln!(csv, "degree,{key},{field},{value}");
            }
        }
    }
    let take = a.scaling_batch.min(split.train.len());
    let batch = &split.train[..take];
    for (axis, values, name) in [(ScalingAxis::Layers, &a.scaling_layers, "layers"), (ScalingAxis::Dim, &a.scaling_dims, "dim")] {
        if values.is_empty() {
            continue;
        }
        let report = scaling_probe(&cfg.model, axis, values, batch, a.repeats)?;
        for row in &report.rows {
            println!(
                "scaling {name}={}: {} params ({} in blocks), step {:.4} s",
                row.value, row.param_count, row.block_params, row.step_seconds
            );
            let key = format!("{name}={}", row.value);
            let _ = writeln!(csv, "scaling,{key},param_count,{}", row.param_count);
            let _ = writeln!(csv, "scaling,{key},embedding_params,{}", row.embedding_params);
            let _ = writeln!(csv, "scaling,{key},block_params,{}", row.block_params);
            let _ = writeln!(csv, "scaling,{key},step_seconds,{}", row.step_seconds);
        }
        println!("scaling {name}: step time R^2 {:.4}", report.r_squared);
        let _ = writeln!(csv, "scaling,{name},r_squared,{}", report.r_squared);
    }
    write_file(dir, ANALYSIS, csv)?;
    if !all_hold {
        return Err(RunError::Numeric("degree bound violated; see analysis.csv".into()));
    }
    Ok(vec![ANALYSIS])
}

/// Two rows at the model's full width; the second is randomly shorter so
/// padding is exercised.
fn gradcheck_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> RunResult<SequenceBatch> {
    let width = cfg.max_len;
    let lens = [width, rng.gen_range(2.min(width)..=width)];
    let mut items = vec![0; 2 * width];
    let mut ts = vec![0i64; 2 * width];
    for (b, &len) in lens.iter().enumerate() {
        let mut t = rng.gen_range(0..1_000_000i64);
        for j in 0..len {
            items[b * width + j] = rng.gen_range(1..cfg.vocab);
            t += rng.gen_range(0..300);
            ts[b * width + j] = t;
        }
    }
    Ok(SequenceBatch::new(items, ts, lens.to_vec(), width)?)
}

fn gradcheck(cfg: &RunConfig, dir: &Path) -> RunResult<Vec<&'static str>> {
    let g = &cfg.gradcheck;
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    for &variant in &g.variants {
        let model = ModelConfig { variant, ..g.model.clone() };
        for seed in 0..g.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = ModelParams::init(&model, &mut rng)?;
            let batch = gradcheck_batch(&model, &mut rng)?;
            let r = grad_check(
                |tape, flat| {
                    let vars = ModelParams::from_flat(tape, flat, &model)?;
                    let mut neg = ChaCha8Rng::seed_from_u64(seed);
                    match sequence_loss(tape, &batch, &vars, &model, &mut neg)? {
                        Some((loss, _)) => Ok(loss),
                        None => Err(fuxi::FuxiError::Data("gradient check batch has no supervised position".into())),
                    }
                },
                &params.flatten(),
                g.fd_step,
            )?;
            worst = worst.max(r.max_rel_error);
            let _ = writeln!(
                report,
                "variant {variant} seed {seed} params {} max_rel_error {:e} worst_index {}",
                r.analytic.len(),
                r.max_rel_error,
                r.worst_index
            );
        }
    }
    let verdict = if worst < g.tolerance { "pass" } else { "fail" };
    let _ = writeln!(report, "max relative error {worst:e} tolerance {:e} {verdict}", g.tolerance);
    print!("{report}");
    write_file(dir, GRADCHECK, report)?;
    if worst < g.tolerance {
        Ok(vec![GRADCHECK])
    } else {
        Err(RunError::Numeric(format!("gradient check max relative error {worst:e} exceeds {:e}", g.tolerance)))
    }
}
