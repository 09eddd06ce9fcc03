//! End-to-end workflows shared by the command line and the tests: train on
//! a split, evaluate a checkpoint with baselines, nested building sweeps and
//! cross-climate transfer.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::evaluation::{
    assert_nested, baseline, check_disjoint, evaluate, make_splits, nested_subsets,
    transfer_matrix, BaselineKind, EvalData, EvalReport, Predictor, Split, SplitSpec, Splits,
    TransferMatrix,
};
use crate::features::{fit_standardizer, BuildingStatic, Standardizer, TimeSeriesRecord};
use crate::model::ModelConfig;
use crate::training::{train, EpochLog, TrainConfig};

#[derive(Debug)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub splits: Splits,
    pub initial_train_loss: f64,
}

/// Standardizer fitted on the records and buildings behind `train`.
pub fn fit_on_split(
    data: &EvalData,
    train: &[crate::evaluation::WindowRef],
) -> Result<Standardizer> {
    let records = data.records_of(train);
    if records.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let ids: BTreeSet<&str> = records.iter().map(|r| r.building_id.as_str()).collect();
    let statics: Vec<BuildingStatic> = ids
        .iter()
        .map(|id| {
            data.statics
                .get(*id)
                .copied()
                .ok_or_else(|| Error::Schema(format!("no statics for building {id}")))
        })
        .collect::<Result<_>>()?;
    fit_standardizer(&records, &statics)
}

/// Splits the records, fits the standardizer on the training split and
/// trains a model.
pub fn train_run(
    records: &[TimeSeriesRecord],
    statics: &BTreeMap<String, BuildingStatic>,
    split: &SplitSpec,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainedRun> {
    model.validate()?;
    config.validate()?;
    let data = EvalData::new(records, statics);
    let splits = make_splits(records, split, model.context_length)?;
    check_disjoint(&splits)?;
    if splits.train.is_empty() || splits.validation.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: splits.train.len().min(splits.validation.len()),
        });
    }
    let std = fit_on_split(&data, &splits.train)?;
    let window = model.window();
    let train_windows = data.windows(&splits.train, &std, &window)?;
    let val_windows = data.windows(&splits.validation, &std, &window)?;
    log::info!(
        "training on {} windows, validating on {}",
        train_windows.len(),
        val_windows.len()
    );
    let outcome = train(&train_windows, &val_windows, model, config)?;
    let train_records = data.records_of(&splits.train);
    let train_buildings: BTreeSet<String> = train_records
        .iter()
        .map(|r| r.building_id.clone())
        .collect();
    let train_climates: BTreeSet<String> =
        train_records.iter().map(|r| r.climate.clone()).collect();
    let checkpoint = Checkpoint {
        model: outcome.model,
        standardizer: std,
        meta: CheckpointMeta {
            train_climates: train_climates.into_iter().collect(),
            train_buildings: train_buildings.into_iter().collect(),
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            split: split.clone(),
            train: config.clone(),
        },
    };
    Ok(TrainedRun {
        checkpoint,
        log: outcome.log,
        splits,
        initial_train_loss: outcome.initial_train_loss,
    })
}

/// Test and validation report for a checkpoint, with the requested
/// baselines attached. Validation windows come from the checkpoint's own
/// training buildings.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    records: &[TimeSeriesRecord],
    statics: &BTreeMap<String, BuildingStatic>,
    baselines: &[BaselineKind],
) -> Result<EvalReport> {
    let data = EvalData::new(records, statics);
    let mut spec = checkpoint.meta.split.clone();
    spec.train_buildings = checkpoint.meta.train_buildings.clone();
    let config = &checkpoint.model.config;
    let splits = make_splits(records, &spec, config.context_length)?;
    let targets: BTreeSet<String> = checkpoint.meta.train_buildings.iter().cloned().collect();
    let sets = [
        (Split::Test, splits.test.as_slice()),
        (Split::Validation, splits.validation.as_slice()),
    ];
    let climates = Some(checkpoint.meta.train_climates.as_slice());
    let mut report = evaluate(&checkpoint.predictor(), &data, &sets, &targets, climates)?;
    for &kind in baselines {
        let b = baseline(
            kind,
            &data,
            &splits.train,
            &checkpoint.standardizer,
            &config.window(),
        )?;
        report.attach_baseline(&evaluate(b.as_ref(), &data, &sets, &targets, None)?)?;
    }
    Ok(report)
}

/// Transfer matrix over labelled checkpoints; `None` marks a missing one.
pub fn transfer(
    checkpoints: &[(String, Option<Checkpoint>)],
    records: &[TimeSeriesRecord],
    statics: &BTreeMap<String, BuildingStatic>,
    split: &SplitSpec,
) -> Result<TransferMatrix> {
    let predictors: Vec<_> = checkpoints
        .iter()
        .map(|(label, c)| (label.clone(), c.as_ref().map(|c| c.predictor())))
        .collect();
    let entries: Vec<(String, Option<&dyn Predictor>)> = predictors
        .iter()
        .map(|(l, p)| (l.clone(), p.as_ref().map(|p| p as &dyn Predictor)))
        .collect();
    let context = checkpoints
        .iter()
        .filter_map(|(_, c)| c.as_ref().map(|c| c.model.config.context_length))
        .max()
        .ok_or_else(|| Error::config("transfer needs at least one checkpoint"))?;
    transfer_matrix(&entries, &EvalData::new(records, statics), split, context)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub building_id: String,
    pub climate: String,
    pub split: Split,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub is_target: bool,
}

#[derive(Debug)]
pub struct SweepResult {
    pub subsets: Vec<Vec<String>>,
    pub runs: Vec<(TrainedRun, EvalReport)>,
    pub rows: Vec<SweepRow>,
}

/// Trains one model per nested building subset drawn from `candidates`
/// and evaluates each on every building.
pub fn sweep(
    records: &[TimeSeriesRecord],
    statics: &BTreeMap<String, BuildingStatic>,
    candidates: &[String],
    counts: &[usize],
    split: &SplitSpec,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<SweepResult> {
    let subsets = nested_subsets(candidates, counts, split.seed)?;
    assert_nested(&subsets)?;
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for subset in &subsets {
        let spec = SplitSpec {
            train_buildings: subset.clone(),
            ..split.clone()
        };
        log::info!("sweep: training on {} buildings", subset.len());
        let run = train_run(records, statics, &spec, model, config)?;
        let report = evaluate_checkpoint(&run.checkpoint, records, statics, &[])?;
        rows.extend(
            report
                .rows
                .iter()
                .filter(|r| r.month == "all")
                .map(|r| SweepRow {
                    count: subset.len(),
                    building_id: r.building_id.clone(),
                    climate: r.climate.clone(),
                    split: r.split,
                    rmse: r.rmse,
                    mape: r.mape,
                    is_target: r.is_target,
                }),
        );
        runs.push((run, report));
    }
    Ok(SweepResult {
        subsets,
        runs,
        rows,
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "count",
        "building_id",
        "climate",
        "split",
        "rmse",
        "mape",
        "is_target",
    ])?;
    for r in rows {
        w.write_record([
            r.count.to_string(),
            r.building_id.clone(),
            r.climate.clone(),
            r.split.as_str().to_string(),
            r.rmse.to_string(),
            r.mape.map(|v| v.to_string()).unwrap_or_default(),
            r.is_target.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
