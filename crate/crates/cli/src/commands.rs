use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use thermoformer_core::checkpoint::file_sha256;
use thermoformer_core::datagen::{generate_dataset, load_dataset, write_dataset, LoadedDataset};
use thermoformer_core::evaluation::BaselineKind;
use thermoformer_core::pipeline::{evaluate_checkpoint, sweep_csv, train_run};
use thermoformer_core::training::write_training_log;
use thermoformer_core::{pipeline, Checkpoint, TimeSeriesRecord};

use crate::config::{resolve, snapshot, Resolved, RunConfig};
use crate::{CliError, Common};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

pub fn prepare(common: &Common, overrides: &[(String, String)]) -> Result<Resolved, CliError> {
    let mut resolved = resolve(common.config.as_deref(), overrides)?;
    if let Some(d) = &common.data {
        resolved.config.data_dir = d.clone();
    }
    if let Some(o) = &common.out {
        resolved.config.out_dir = o.clone();
    }
    Ok(resolved)
}

/// Writes the config snapshot and a manifest hashing it and `files`.
fn finish(
    dir: &Path,
    command: &str,
    config: &RunConfig,
    mut files: Vec<PathBuf>,
    extra: Value,
) -> Result<(), CliError> {
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, snapshot(config))?;
    files.push(config_path);
    files.sort();
    let entries = files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            Ok(json!({ "path": rel.to_string_lossy(), "sha256": file_sha256(p)? }))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = json!({
        "command": command,
        "seed": config.seed,
        "details": extra,
        "files": entries,
    });
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(thermoformer_core::Error::from)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    log::info!("wrote {}", dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn load(config: &RunConfig) -> Result<LoadedDataset, CliError> {
    Ok(load_dataset(&config.data_dir)?)
}

fn climates(records: &[TimeSeriesRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.climate.clone()).collect()
}

pub fn simulate(r: &Resolved) -> Result<(), CliError> {
    let config = &r.config;
    let dataset = generate_dataset(&config.dataset)?;
    let dir = &config.data_dir;
    let files = write_dataset(dir, &dataset.records, &dataset.statics())?;
    log::info!(
        "wrote {} records to {}",
        dataset.records.len(),
        dir.display()
    );
    let details = json!({
        "counts": config.dataset.counts,
        "modes": config.dataset.modes,
        "hours": config.dataset.hours,
        "records": dataset.records.len(),
    });
    finish(dir, "simulate", config, files, details)
}

pub fn train(r: &Resolved) -> Result<(), CliError> {
    let config = &r.config;
    let data = load(config)?;
    let available = climates(&data.records);
    if let Some(missing) = config
        .train_climates
        .iter()
        .find(|c| !available.contains(*c))
    {
        return Err(CliError::Usage(format!(
            "train_climates: no records for climate '{missing}'"
        )));
    }
    let records: Vec<TimeSeriesRecord> = data
        .records
        .into_iter()
        .filter(|rec| {
            config.train_climates.is_empty() || config.train_climates.contains(&rec.climate)
        })
        .collect();
    let run = train_run(
        &records,
        &data.statics,
        &config.split,
        &config.model,
        &config.train,
    )?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    run.checkpoint.save(&ckpt)?;
    let log_path = dir.join(TRAINING_LOG_FILE);
    write_training_log(&run.log, &log_path)?;
    let meta = &run.checkpoint.meta;
    log::info!(
        "best epoch {} with validation loss {:.6}",
        meta.best_epoch,
        meta.best_val_loss
    );
    let details = json!({
        "data_dir": config.data_dir,
        "train_buildings": meta.train_buildings,
        "train_climates": meta.train_climates,
        "best_epoch": meta.best_epoch,
        "best_val_loss": meta.best_val_loss,
        "epochs": run.log.len(),
    });
    finish(dir, "train", config, vec![ckpt, log_path], details)
}

pub fn evaluate(r: &Resolved, checkpoint: &Path, flags: &[BaselineKind]) -> Result<(), CliError> {
    let config = &r.config;
    let ckpt = Checkpoint::load(checkpoint)?;
    if r.is_explicit("model") && config.model != ckpt.model.config {
        return Err(CliError::Usage(format!(
            "checkpoint {} was trained with model settings {} but the config specifies {}",
            checkpoint.display(),
            serde_json::to_string(&ckpt.model.config).unwrap_or_default(),
            serde_json::to_string(&config.model).unwrap_or_default(),
        )));
    }
    let data = load(config)?;
    let mut baselines = config.baselines.clone();
    for b in flags {
        if !baselines.contains(b) {
            baselines.push(*b);
        }
    }
    let report = evaluate_checkpoint(&ckpt, &data.records, &data.statics, &baselines)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    let (json_path, csv_path) = (dir.join("report.json"), dir.join("report.csv"));
    report.write(&json_path, &csv_path)?;
    for s in &report.summary {
        log::info!(
            "{}: pooled RMSE {:.4} °C over {} windows",
            s.split.as_str(),
            s.pooled_rmse,
            s.n
        );
    }
    let details = json!({
        "data_dir": config.data_dir,
        "checkpoint": checkpoint,
        "checkpoint_sha256": file_sha256(checkpoint)?,
        "baselines": baselines,
    });
    finish(dir, "evaluate", config, vec![json_path, csv_path], details)
}

pub fn transfer(r: &Resolved, paths: &[PathBuf]) -> Result<(), CliError> {
    let config = &r.config;
    let mut checkpoints = Vec::with_capacity(paths.len());
    let mut hashes = Vec::new();
    for p in paths {
        if p.exists() {
            let c = Checkpoint::load(p)?;
            hashes.push(json!({ "path": p, "sha256": file_sha256(p)? }));
            checkpoints.push((c.meta.train_climates.join("+"), Some(c)));
        } else {
            log::warn!(
                "checkpoint {} is missing; its row is reported as absent",
                p.display()
            );
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            checkpoints.push((label, None));
        }
    }
    let data = load(config)?;
    let matrix = pipeline::transfer(&checkpoints, &data.records, &data.statics, &config.split)?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    let (json_path, csv_path) = (dir.join("transfer.json"), dir.join("transfer.csv"));
    std::fs::write(&json_path, matrix.to_json()?)?;
    std::fs::write(&csv_path, matrix.to_csv()?)?;
    let details = json!({ "data_dir": config.data_dir, "checkpoints": hashes });
    finish(dir, "transfer", config, vec![json_path, csv_path], details)
}

pub fn sweep(r: &Resolved) -> Result<(), CliError> {
    let config = &r.config;
    let data = load(config)?;
    let available = climates(&data.records);
    let climate = match &config.sweep.climate {
        Some(c) if available.contains(c) => c.clone(),
        Some(c) => {
            return Err(CliError::Usage(format!(
                "sweep.climate: no records for climate '{c}'"
            )))
        }
        None => available
            .first()
            .cloned()
            .ok_or_else(|| CliError::Usage("dataset has no records".into()))?,
    };
    let records: Vec<TimeSeriesRecord> = data
        .records
        .into_iter()
        .filter(|rec| rec.climate == climate)
        .collect();
    let candidates: Vec<String> = records
        .iter()
        .map(|rec| rec.building_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let result = pipeline::sweep(
        &records,
        &data.statics,
        &candidates,
        &config.sweep.counts,
        &config.split,
        &config.model,
        &config.train,
    )?;
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (subset, (run, _)) in result.subsets.iter().zip(&result.runs) {
        let sub = dir.join(format!("count_{}", subset.len()));
        std::fs::create_dir_all(&sub)?;
        let ckpt = sub.join(CHECKPOINT_FILE);
        run.checkpoint.save(&ckpt)?;
        let log_path = sub.join(TRAINING_LOG_FILE);
        write_training_log(&run.log, &log_path)?;
        files.extend([ckpt, log_path]);
    }
    let csv_path = dir.join("sweep.csv");
    std::fs::write(&csv_path, sweep_csv(&result.rows)?)?;
    files.push(csv_path);
    let details = json!({
        "data_dir": config.data_dir,
        "climate": climate,
        "subsets": result.subsets,
    });
    finish(dir, "sweep", config, files, details)
}
