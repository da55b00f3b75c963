//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use tpn_core::checkpoint::{load_checkpoint, save_checkpoint};
use tpn_core::datasets::{self, DomainPair};
use tpn_core::gradcheck;
use tpn_core::net::embed_all;
use tpn_core::trainer::{fit, predict, FitResult, ProtoChoice, TrainRecord};
use tpn_core::{Error, Result};

use crate::spec::{RunSpec, RunSeeds};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Serialize)]
struct Summary {
    name: String,
    seed: u64,
    iterations: usize,
    final_src_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_tgt_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    first_tgt_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho_first: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho_final: Option<f64>,
    assigned_frac_final: f64,
    l_s: f64,
    l_g: f64,
    l_t: f64,
    total: f64,
    timestamp_unix: u64,
}

fn summary_from(spec: &RunSpec, seed: u64, result: &FitResult) -> Summary {
    let first = result.log.records.first();
    let last = result.log.records.last();
    let f = |pick: fn(&TrainRecord) -> f64| last.map(pick).unwrap_or(0.0);
    Summary {
        name: spec.name.clone(),
        seed,
        iterations: last.map(|r| r.iteration).unwrap_or(0),
        final_src_acc: f(|r| r.src_acc),
        final_tgt_acc: last.and_then(|r| r.tgt_acc),
        first_tgt_acc: first.and_then(|r| r.tgt_acc),
        rho_first: first.and_then(|r| r.rho),
        rho_final: last.and_then(|r| r.rho),
        assigned_frac_final: f(|r| r.assigned_frac),
        l_s: f(|r| r.l_s),
        l_g: f(|r| r.l_g),
        l_t: f(|r| r.l_t),
        total: f(|r| r.total),
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    }
}

fn run_fit(spec: &RunSpec, seed: u64) -> Result<(DomainPair, FitResult)> {
    let seeds = RunSeeds::from(seed);
    let pair = spec.build_dataset(seeds.data)?;
    let net_cfg = spec.network(pair.input_dim, seeds.net);
    let cfg = spec.train_config(seeds.episodes);
    let result = fit(
        &net_cfg,
        &cfg,
        &pair.source_inputs,
        &pair.source_labels,
        &pair.target_inputs,
        pair.classes,
        pair.target_oracle_labels.as_deref(),
    )?;
    Ok((pair, result))
}

fn write_confusion(path: &Path, truth: &[usize], predicted: &[usize], classes: usize) -> Result<()> {
    let mut counts = vec![0usize; classes * classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        counts[t * classes + p] += 1;
    }
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..classes).map(|c| format!("pred_{}", c)).collect();
    writeln!(out, "true,{}", header.join(","))?;
    for t in 0..classes {
        let row: Vec<String> = (0..classes)
            .map(|p| counts[t * classes + p].to_string())
            .collect();
        writeln!(out, "{},{}", t, row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// `train`: run one spec and write the log, checkpoint, confusion matrix, and
/// summary into the output directory.
pub fn cmd_train(spec_path: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<()> {
    let spec = RunSpec::load(spec_path)?;
    let seed = seed_override.unwrap_or(spec.seed);
    let (pair, result) = run_fit(&spec, seed)?;

    fs::create_dir_all(out_dir)?;
    result.log.write_csv(&out_dir.join("trainlog.csv"))?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &result.params, Some(&result.frozen))?;

    if let Some(oracle) = &pair.target_oracle_labels {
        let (_, predicted) = predict(&result.params, &result.frozen, &pair.target_inputs, ProtoChoice::St)?;
        write_confusion(&out_dir.join("confusion.csv"), oracle, &predicted, pair.classes)?;
    }

    let summary = summary_from(&spec, seed, &result);
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {}", e)))?;
    fs::write(out_dir.join("summary.json"), json.as_bytes())?;

    match summary.final_tgt_acc {
        Some(acc) => println!(
            "{}: src_acc {:.4}, tgt_acc {:.4} ({} iterations)",
            spec.name, summary.final_src_acc, acc, summary.iterations
        ),
        None => println!(
            "{}: src_acc {:.4} ({} iterations)",
            spec.name, summary.final_src_acc, summary.iterations
        ),
    }
    Ok(())
}

/// `compare`: run several specs (identical dataset and model blocks) over a
/// seed list and tabulate target accuracy per spec.
pub fn cmd_compare(spec_paths: &[std::path::PathBuf], seeds: &[u64], out: Option<&Path>) -> Result<()> {
    if spec_paths.len() < 2 {
        return Err(Error::Config("compare needs at least two specs".to_string()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("compare needs at least one seed".to_string()));
    }
    let specs: Vec<RunSpec> = spec_paths.iter().map(|p| RunSpec::load(p)).collect::<Result<_>>()?;
    for s in &specs[1..] {
        if s.dataset != specs[0].dataset || s.model != specs[0].model {
            return Err(Error::Shape {
                op: "compare",
                detail: format!(
                    "spec {:?} differs from {:?} outside the train block",
                    s.name, specs[0].name
                ),
            });
        }
    }

    let mut table: Vec<Vec<f64>> = Vec::new(); // [seed][spec] target accuracy
    for &seed in seeds {
        let mut row = Vec::new();
        for spec in &specs {
            let (_, result) = run_fit(spec, seed)?;
            let acc = result
                .log
                .records
                .last()
                .and_then(|r| r.tgt_acc)
                .ok_or_else(|| {
                    Error::Config("compare requires a dataset with oracle target labels".to_string())
                })?;
            row.push(acc);
        }
        table.push(row);
    }

    let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    println!("seed,{}", names.join(","));
    for (&seed, row) in seeds.iter().zip(&table) {
        let cells: Vec<String> = row.iter().map(|v| format!("{:.4}", v)).collect();
        println!("{},{}", seed, cells.join(","));
    }
    let stats: Vec<(f64, f64)> = (0..specs.len())
        .map(|j| {
            let col: Vec<f64> = table.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            (mean, var.sqrt())
        })
        .collect();
    let cells: Vec<String> = stats
        .iter()
        .map(|(m, s)| format!("{:.4}±{:.4}", m, s))
        .collect();
    println!("mean±std,{}", cells.join(","));

    if let Some(path) = out {
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "seed,{}", names.join(","))?;
        for (&seed, row) in seeds.iter().zip(&table) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{},{}", seed, cells.join(","))?;
        }
        f.flush()?;
    }
    Ok(())
}

/// `dump-embeddings`: embed a spec's dataset under a trained checkpoint and
/// write coordinates, labels, domain tags, and predictions as CSV.
pub fn cmd_dump_embeddings(checkpoint: &Path, spec_path: &Path, out: &Path) -> Result<()> {
    let (params, frozen) = load_checkpoint(checkpoint)?;
    let frozen = frozen.ok_or_else(|| {
        Error::Config(format!(
            "{}: checkpoint has no frozen prototypes",
            checkpoint.display()
        ))
    })?;
    let spec = RunSpec::load(spec_path)?;
    let pair = spec.build_dataset(RunSeeds::from(spec.seed).data)?;
    if pair.input_dim != params.config().input_dim {
        return Err(Error::Shape {
            op: "dump-embeddings",
            detail: format!(
                "checkpoint expects input_dim {}, dataset has {}",
                params.config().input_dim,
                pair.input_dim
            ),
        });
    }

    let m = params.config().embedding_dim;
    let mut out_file = BufWriter::new(File::create(out)?);
    let coords: Vec<String> = (0..m).map(|i| format!("e{}", i)).collect();
    writeln!(out_file, "{},label,domain,predicted", coords.join(","))?;

    let mut dump = |inputs: &tpn_core::Tensor, labels: Option<&[usize]>, tag: &str| -> Result<()> {
        let emb = embed_all(&params, inputs, 256)?;
        let (_, predicted) = predict(&params, &frozen, inputs, ProtoChoice::St)?;
        for i in 0..emb.rows() {
            let cs: Vec<String> = emb.row(i).iter().map(|v| v.to_string()).collect();
            let label = labels.map(|l| l[i].to_string()).unwrap_or_default();
            writeln!(out_file, "{},{},{},{}", cs.join(","), label, tag, predicted[i])?;
        }
        Ok(())
    };
    dump(&pair.source_inputs, Some(&pair.source_labels), "source")?;
    dump(
        &pair.target_inputs,
        pair.target_oracle_labels.as_deref(),
        "target",
    )?;
    out_file.flush()?;
    Ok(())
}

/// `gen-data`: write a spec's synthetic dataset as CSV.
pub fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = RunSpec::load(spec_path)?;
    let pair = spec.build_dataset(RunSeeds::from(spec.seed).data)?;
    datasets::export_csv(&pair, out)?;
    println!(
        "{}: wrote {} source + {} target samples",
        spec.name,
        pair.source_inputs.rows(),
        pair.target_inputs.rows()
    );
    Ok(())
}

/// `check`: run the gradient-check suites and report one line per entry.
pub fn cmd_check() -> Result<()> {
    let mut all_ok = true;
    let mut report = |results: Vec<gradcheck::SuiteResult>| {
        for r in results {
            let ok = r.passed(GRADCHECK_TOLERANCE);
            all_ok &= ok;
            println!(
                "{:<40} {:>3} points  max err {:>12.3e}  {}",
                r.name,
                r.points,
                r.max_error,
                if ok { "PASS" } else { "FAIL" }
            );
        }
    };
    report(gradcheck::op_suite(100, 1)?);
    report(gradcheck::episode_suite(20, 2)?);
    if all_ok {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: "gradient check suite (see FAIL lines above)".to_string(),
        })
    }
}
