//! Bodies for the synth, train, evaluate, export, and selftest subcommands.

use crate::{EvaluateArgs, ExportArgs, SelftestArgs, SynthArgs, TrainArgs};
use fluoroformer::model::FusionMode;
use fluoroformer::numerics::{Precision, Scalar};
use fluoroformer::selftest::{run_selftest, CheckKind, CheckResult, FaultInjection};
use fluoroformer::trainer::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadedCheckpoint};
use fluoroformer::trainer::config::TrainConfig;
use fluoroformer::trainer::export::export_interpretability;
use fluoroformer::trainer::synth::{synth_cohort, SynthConfig, SynthKind};
use fluoroformer::trainer::train::{
    cross_validate, evaluate as evaluate_cohort, load_cohort, write_epoch_log, CrossValidation,
    TrainSample,
};
use fluoroformer::{Error, Result};
use std::io::Write;
use std::path::Path;
use std::process::ExitCode;
use std::str::FromStr;

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        kind: SynthKind::from_str(&args.kind)?,
        n_samples: args.n,
        m: args.m,
        d_emb: args.d_emb,
        grid: args.grid,
        censor_rate: args.censor_rate,
        seed: args.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let cohort = synth_cohort(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    cohort.write(&args.out)?;
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_text(&args.out.join("config.json"), &json)?;
    let oracle = match cohort.oracle_c_index() {
        Ok(c) => format!("{c:.4}"),
        Err(_) => "undefined".to_string(),
    };
    println!(
        "wrote {} samples ({} events) to {}; oracle C-index {oracle}",
        cohort.rows.len(),
        cohort.event_count(),
        args.out.display()
    );
    Ok(())
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::config(format!(
            "unknown precision {other:?}, expected f32 or f64"
        ))),
    }
}

/// Flags > config file > defaults.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = &args.mode {
        cfg.mode = FusionMode::from_str(v)?;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.n_bin {
        cfg.n_bin = v;
    }
    if let Some(v) = args.d_hid {
        cfg.d_hid = v;
    }
    if let Some(v) = args.d_att {
        cfg.d_att = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = &args.precision {
        cfg.precision = parse_precision(v)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let manifest = args.bags.join("manifest.csv");
    std::fs::create_dir_all(&args.out)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &manifest, &args.out),
        Precision::F64 => train_as::<f64>(&cfg, &manifest, &args.out),
    }
}

fn train_as<S: Scalar>(cfg: &TrainConfig, manifest: &Path, out: &Path) -> Result<()> {
    let samples = load_cohort::<S>(manifest)?;
    let cv = cross_validate(&samples, cfg)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let mut records = Vec::new();
    for fold in &cv.folds {
        let path = out.join(format!("fold_{}.ckpt", fold.outcome.fold));
        save_checkpoint(&path, &fold.outcome.checkpoint)?;
        records.extend(fold.outcome.epochs.iter().cloned());
    }
    write_epoch_log(&out.join("epochs.jsonl"), &records)?;
    write_test_risks(&out.join("test_risks.csv"), &cv)?;
    let table = cv.summary_table();
    std::fs::write(out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn write_test_risks<S: Scalar>(path: &Path, cv: &CrossValidation<S>) -> Result<()> {
    let err = |e: csv::Error| Error::format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["fold", "sample_id", "risk"]).map_err(err)?;
    for fold in &cv.folds {
        for (id, risk) in &fold.eval.risks {
            w.write_record([&fold.outcome.fold.to_string(), id, &format!("{risk}")])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let manifest = args.bags.join("manifest.csv");
    match load_checkpoint(&args.checkpoint)? {
        LoadedCheckpoint::F32(c) => evaluate_as(&c, &manifest, &args.out),
        LoadedCheckpoint::F64(c) => evaluate_as(&c, &manifest, &args.out),
    }
}

fn evaluate_as<S: Scalar>(ckpt: &Checkpoint<S>, manifest: &Path, out: &Path) -> Result<()> {
    let samples = load_cohort::<S>(manifest)?;
    let refs: Vec<&TrainSample<S>> = samples.iter().collect();
    let eval = evaluate_cohort(&ckpt.model, &refs)?;
    std::fs::create_dir_all(out)?;

    let risks_path = out.join("risks.csv");
    let err = |e: csv::Error| Error::format(format!("risks.csv: {e}"));
    let mut w = csv::Writer::from_path(&risks_path).map_err(err)?;
    w.write_record(["sample_id", "risk"]).map_err(err)?;
    for (id, risk) in &eval.risks {
        w.write_record([id.as_str(), &format!("{risk}")]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::format(format!("risks.csv: {e}")))?;

    let defined: Vec<f64> = eval.morans.iter().filter_map(|(_, m)| *m).collect();
    let mean_moran = (!defined.is_empty())
        .then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let payload = serde_json::json!({
        "c_index": eval.c_index,
        "n_samples": eval.risks.len(),
        "mean_morans_i": mean_moran,
        "checkpoint_epoch": ckpt.epoch,
        "checkpoint_val_c_index": ckpt.val_c_index,
    });
    write_text(
        &out.join("eval.json"),
        &serde_json::to_string_pretty(&payload).expect("payload serializes"),
    )?;
    println!("C-index {:.4} over {} samples", eval.c_index, eval.risks.len());
    Ok(())
}

pub fn export(args: &ExportArgs) -> Result<()> {
    match load_checkpoint(&args.checkpoint)? {
        LoadedCheckpoint::F32(c) => export_as(&c, args),
        LoadedCheckpoint::F64(c) => export_as(&c, args),
    }
}

fn export_as<S: Scalar>(ckpt: &Checkpoint<S>, args: &ExportArgs) -> Result<()> {
    let samples = load_cohort::<S>(&args.bags.join("manifest.csv"))?;
    let refs: Vec<&TrainSample<S>> = samples.iter().collect();
    let report = export_interpretability(&ckpt.model, &refs, &args.out)?;
    write_text(&args.out.join("config.json"), &ckpt.config.to_json())?;
    let defined = report.morans.iter().filter(|(_, m)| m.is_some()).count();
    println!(
        "wrote {} files for {} slides ({} with defined Moran's I) to {}",
        report.files.len(),
        report.morans.len(),
        defined,
        args.out.display()
    );
    Ok(())
}

pub fn selftest(args: &SelftestArgs) -> Result<ExitCode> {
    let results = run_selftest(FaultInjection {
        corrupt_format: args.inject_format_bug,
        perturb_gradient: args.inject_gradient_bug,
    });
    let mut first_fail: Option<&CheckResult> = None;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:<32}  {}", r.name, r.detail);
        if !r.passed && first_fail.is_none() {
            first_fail = Some(r);
        }
    }
    match first_fail {
        None => {
            println!("all {} checks passed", results.len());
            Ok(ExitCode::SUCCESS)
        }
        Some(r) => {
            eprintln!("selftest failed at {}: {}", r.name, r.detail);
            Ok(ExitCode::from(match r.kind {
                CheckKind::Format => 2u8,
                CheckKind::Numeric => 3u8,
            }))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        f.write_all(b"\n")?;
    }
    Ok(())
}
