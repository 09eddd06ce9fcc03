//! Split protocol, metrics, reference baselines, per-building and monthly
//! reports, and the cross-climate transfer matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    window_at, BuildingStatic, Standardizer, TimeSeriesRecord, WindowConfig, WindowSample,
};
use crate::model::PhysicsTransformer;
use crate::seed::derive_seed;

/// Truth values closer to zero than this are left out of MAPE.
pub const MAPE_GUARD: f64 = 0.1;
pub const DEFAULT_RIDGE: f64 = 1e-3;
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// Mode held out entirely for testing.
    pub test_mode: u8,
    pub val_fraction: f64,
    pub seed: u64,
    /// Buildings whose non-test records are used for training. Empty means all.
    pub train_buildings: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_mode: 1,
            val_fraction: 0.10,
            seed: 0,
            train_buildings: Vec::new(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        crate::datagen::validate_mode(self.test_mode)?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn is_train_building(&self, id: &str) -> bool {
        self.train_buildings.is_empty() || self.train_buildings.iter().any(|b| b == id)
    }
}

/// A window identified by its record and target index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub record: usize,
    pub target: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<WindowRef>,
    pub validation: Vec<WindowRef>,
    pub test: Vec<WindowRef>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[WindowRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Number of validation windows drawn from a record with `windows` windows.
pub fn validation_count(windows: usize, fraction: f64) -> usize {
    ((windows as f64 * fraction).round() as usize).clamp(1, windows.max(1))
}

/// Test: every window of every `test_mode` record. Validation and train:
/// per remaining record of a training building, a seeded sample of window
/// indices and its complement.
pub fn make_splits(
    records: &[TimeSeriesRecord],
    spec: &SplitSpec,
    context_length: usize,
) -> Result<Splits> {
    spec.validate()?;
    for id in &spec.train_buildings {
        if !records.iter().any(|r| &r.building_id == id) {
            return Err(Error::config(format!(
                "training building {id} has no records"
            )));
        }
    }
    let mut splits = Splits::default();
    for (ri, r) in records.iter().enumerate() {
        let targets: Vec<usize> = (context_length..r.len()).collect();
        if targets.is_empty() {
            log::warn!(
                "{} mode {}: no windows for context {context_length}",
                r.building_id,
                r.hvac_mode
            );
            continue;
        }
        let refs = |ts: &[usize]| {
            ts.iter()
                .map(|&t| WindowRef {
                    record: ri,
                    target: t,
                })
                .collect::<Vec<_>>()
        };
        if r.hvac_mode == spec.test_mode {
            splits.test.extend(refs(&targets));
            continue;
        }
        if !spec.is_train_building(&r.building_id) {
            continue;
        }
        let w = targets.len();
        if (w as f64) < 1.0 / spec.val_fraction {
            log::warn!(
                "{} mode {}: only {w} windows, forcing one validation window",
                r.building_id,
                r.hvac_mode
            );
        }
        let k = validation_count(w, spec.val_fraction);
        let mut shuffled = targets.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            spec.seed,
            &format!("validation/{}/mode{}", r.building_id, r.hvac_mode),
        ));
        shuffled.shuffle(&mut rng);
        let val: BTreeSet<usize> = shuffled[..k].iter().copied().collect();
        let (v, t): (Vec<usize>, Vec<usize>) = targets.iter().partition(|t| val.contains(t));
        splits.validation.extend(refs(&v));
        splits.train.extend(refs(&t));
    }
    Ok(splits)
}

/// Nested building subsets: a seeded ordering of `candidates`, cut at each
/// count. Counts must be increasing and no larger than the candidate pool.
pub fn nested_subsets(
    candidates: &[String],
    counts: &[usize],
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::config(
            "building counts must be nonempty and positive",
        ));
    }
    if counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config(format!(
            "building counts must increase, got {counts:?}"
        )));
    }
    let max = *counts.last().expect("nonempty");
    if max > candidates.len() {
        return Err(Error::config(format!(
            "building count {max} exceeds the {} available buildings",
            candidates.len()
        )));
    }
    let mut order = candidates.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "subsets")));
    let subsets: Vec<Vec<String>> = counts.iter().map(|&n| order[..n].to_vec()).collect();
    assert_nested(&subsets)?;
    Ok(subsets)
}

pub fn assert_nested(subsets: &[Vec<String>]) -> Result<()> {
    for w in subsets.windows(2) {
        let larger: BTreeSet<&String> = w[1].iter().collect();
        if let Some(missing) = w[0].iter().find(|b| !larger.contains(b)) {
            return Err(Error::contract(format!(
                "building subsets are not nested: {missing} dropped"
            )));
        }
    }
    Ok(())
}

/// Checks that no (record, target) pair appears in two splits.
pub fn check_disjoint(splits: &Splits) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (name, refs) in [
        ("train", &splits.train),
        ("validation", &splits.validation),
        ("test", &splits.test),
    ] {
        for r in refs.iter() {
            if !seen.insert(*r) {
                return Err(Error::contract(format!(
                    "window (record {}, target {}) repeated in {name}",
                    r.record, r.target
                )));
            }
        }
    }
    Ok(())
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths("rmse", pred, truth)?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Percent; `None` when every truth value was guarded out.
    pub percent: Option<f64>,
    pub excluded: usize,
}

pub fn mape(pred: &[f64], truth: &[f64]) -> Result<Mape> {
    check_lengths("mape", pred, truth)?;
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for (p, t) in pred.iter().zip(truth) {
        if t.abs() < MAPE_GUARD {
            excluded += 1;
        } else {
            sum += ((p - t) / t).abs();
            n += 1;
        }
    }
    Ok(Mape {
        percent: (n > 0).then(|| 100.0 * sum / n as f64),
        excluded,
    })
}

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension {
            op,
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok(())
}

/// Records and statics that window references index into.
#[derive(Clone, Copy, Debug)]
pub struct EvalData<'a> {
    pub records: &'a [TimeSeriesRecord],
    pub statics: &'a BTreeMap<String, BuildingStatic>,
}

impl<'a> EvalData<'a> {
    pub fn new(
        records: &'a [TimeSeriesRecord],
        statics: &'a BTreeMap<String, BuildingStatic>,
    ) -> Self {
        Self { records, statics }
    }

    pub fn truth(&self, r: WindowRef) -> f64 {
        self.records[r.record].t_in[r.target]
    }

    pub fn static_of(&self, record: usize) -> Result<&BuildingStatic> {
        let id = &self.records[record].building_id;
        self.statics
            .get(id)
            .ok_or_else(|| Error::Schema(format!("no statics for building {id}")))
    }

    /// Standardized windows for `refs`.
    pub fn windows(
        &self,
        refs: &[WindowRef],
        std: &Standardizer,
        cfg: &WindowConfig,
    ) -> Result<Vec<WindowSample>> {
        refs.par_iter()
            .map(|r| {
                let s = std.apply_static(self.static_of(r.record)?);
                window_at(&self.records[r.record], &s, std, cfg, r.target)
            })
            .collect()
    }

    /// Records used for fitting a standardizer: every record with at least one
    /// window in `refs`.
    pub fn records_of(&self, refs: &[WindowRef]) -> Vec<&'a TimeSeriesRecord> {
        let ids: BTreeSet<usize> = refs.iter().map(|r| r.record).collect();
        ids.into_iter().map(|i| &self.records[i]).collect()
    }
}

/// Anything that produces a next-hour indoor temperature for a window.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, data: &EvalData, refs: &[WindowRef]) -> Result<Vec<f64>>;
}

/// The network paired with the standardizer it was trained under.
#[derive(Clone, Copy, Debug)]
pub struct ModelPredictor<'a> {
    pub model: &'a PhysicsTransformer,
    pub std: &'a Standardizer,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        "model".into()
    }

    fn predict(&self, data: &EvalData, refs: &[WindowRef]) -> Result<Vec<f64>> {
        let cfg = self.model.config.window();
        let parts: Vec<Vec<f64>> = refs
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let windows = chunk
                    .iter()
                    .map(|r| {
                        let s = self.std.apply_static(data.static_of(r.record)?);
                        window_at(&data.records[r.record], &s, self.std, &cfg, r.target)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let deltas = self.model.forward_batch(&windows)?;
                Ok(windows
                    .iter()
                    .zip(deltas)
                    .map(|(w, d)| w.t_prev + d)
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }
}

/// Predicts no change.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn predict(&self, data: &EvalData, refs: &[WindowRef]) -> Result<Vec<f64>> {
        Ok(refs
            .iter()
            .map(|r| data.records[r.record].t_in[r.target - 1])
            .collect())
    }
}

/// Returns the ground truth; a test fixture for report plumbing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Predictor for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, data: &EvalData, refs: &[WindowRef]) -> Result<Vec<f64>> {
        Ok(refs.iter().map(|&r| data.truth(r)).collect())
    }
}

/// Ridge regression from the flattened window (past block, statics, future
/// covariates, bias) to the temperature change.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAr {
    pub weights: Vec<f64>,
    pub ridge: f64,
    pub std: Standardizer,
    pub window: WindowConfig,
}

fn design_row(w: &WindowSample) -> Vec<f64> {
    let mut x = Vec::with_capacity(w.past.len() + w.static_features.len() + w.future.len() + 1);
    x.extend_from_slice(&w.past);
    x.extend_from_slice(&w.static_features);
    x.extend_from_slice(&w.future);
    x.push(1.0);
    x
}

impl LinearAr {
    /// Closed-form fit on standardized windows. The bias is not penalized.
    /// If the normal equations are not positive definite the ridge grows
    /// tenfold until they are.
    pub fn fit_windows(windows: &[WindowSample], ridge: f64) -> Result<(Vec<f64>, f64)> {
        let first = windows
            .first()
            .ok_or_else(|| Error::contract("linear_ar needs a nonempty training split"))?;
        let d = design_row(first).len();
        let partials: Vec<(Vec<f64>, Vec<f64>)> = windows
            .par_chunks(1024)
            .map(|chunk| {
                let mut xtx = vec![0.0; d * d];
                let mut xty = vec![0.0; d];
                for w in chunk {
                    let x = design_row(w);
                    for i in 0..d {
                        xty[i] += x[i] * w.target_delta;
                        let row = &mut xtx[i * d..(i + 1) * d];
                        for j in i..d {
                            row[j] += x[i] * x[j];
                        }
                    }
                }
                (xtx, xty)
            })
            .collect();
        let mut xtx = vec![0.0; d * d];
        let mut xty = vec![0.0; d];
        for (a, b) in partials {
            xtx.iter_mut().zip(a).for_each(|(s, v)| *s += v);
            xty.iter_mut().zip(b).for_each(|(s, v)| *s += v);
        }
        for i in 0..d {
            for j in 0..i {
                xtx[i * d + j] = xtx[j * d + i];
            }
        }
        let rhs = DVector::from_vec(xty);
        let mut lambda = ridge;
        for _ in 0..12 {
            let mut a = DMatrix::from_row_slice(d, d, &xtx);
            for i in 0..d - 1 {
                a[(i, i)] += lambda;
            }
            if let Some(chol) = a.cholesky() {
                let w = chol.solve(&rhs);
                if w.iter().all(|v| v.is_finite()) {
                    return Ok((w.iter().copied().collect(), lambda));
                }
            }
            log::warn!("linear_ar normal equations singular at ridge {lambda:e}; increasing");
            lambda = if lambda > 0.0 { lambda * 10.0 } else { 1e-8 };
        }
        Err(Error::NumericFault(
            "linear_ar normal equations stayed singular".into(),
        ))
    }

    pub fn fit(
        data: &EvalData,
        train: &[WindowRef],
        std: &Standardizer,
        window: &WindowConfig,
        ridge: f64,
    ) -> Result<Self> {
        let windows = data.windows(train, std, window)?;
        let (weights, ridge) = Self::fit_windows(&windows, ridge)?;
        Ok(Self {
            weights,
            ridge,
            std: std.clone(),
            window: *window,
        })
    }

    pub fn predict_delta(&self, w: &WindowSample) -> f64 {
        design_row(w)
            .iter()
            .zip(&self.weights)
            .map(|(x, b)| x * b)
            .sum()
    }
}

impl Predictor for LinearAr {
    fn name(&self) -> String {
        "linear_ar".into()
    }

    fn predict(&self, data: &EvalData, refs: &[WindowRef]) -> Result<Vec<f64>> {
        let parts: Vec<Vec<f64>> = refs
            .par_chunks(PREDICT_CHUNK)
            .map(|chunk| {
                let ws = data.windows(chunk, &self.std, &self.window)?;
                Ok(ws
                    .iter()
                    .map(|w| w.t_prev + self.predict_delta(w))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(parts.concat())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Persistence,
    LinearAr,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persistence" => Ok(Self::Persistence),
            "linear_ar" => Ok(Self::LinearAr),
            other => Err(Error::config(format!(
                "unknown baseline '{other}', expected persistence or linear_ar"
            ))),
        }
    }
}

/// Fits the requested baseline on `train` (ignored by persistence).
pub fn baseline(
    kind: BaselineKind,
    data: &EvalData,
    train: &[WindowRef],
    std: &Standardizer,
    window: &WindowConfig,
) -> Result<Box<dyn Predictor>> {
    Ok(match kind {
        BaselineKind::Persistence => Box::new(Persistence),
        BaselineKind::LinearAr => Box::new(LinearAr::fit(data, train, std, window, DEFAULT_RIDGE)?),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub building_id: String,
    pub climate: String,
    pub split: Split,
    /// `YYYY-MM`, or `all` for the whole split.
    pub month: String,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub n: usize,
    pub mape_excluded: usize,
    pub is_target: bool,
    /// RMSE of each attached baseline on the same windows.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline_rmse: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline_mape: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: Split,
    pub n: usize,
    /// RMSE over all windows of the split (primary).
    pub pooled_rmse: f64,
    pub pooled_mape: Option<f64>,
    /// Mean of per-building RMSEs.
    pub mean_building_rmse: f64,
    pub target_rmse: Option<f64>,
    pub non_target_rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline_pooled_rmse: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub baseline_non_target_rmse: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub mape_guard: f64,
    pub summary: Vec<SplitSummary>,
    pub rows: Vec<EvalRow>,
}

/// Predictions for one split, kept to attach baselines later.
struct Scored {
    split: Split,
    refs: Vec<WindowRef>,
    pred: Vec<f64>,
}

/// One-step predictions on each requested split, aggregated per building,
/// per month and pooled. `targets` are the buildings seen in training.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &EvalData,
    splits: &[(Split, &[WindowRef])],
    targets: &BTreeSet<String>,
    train_climates: Option<&[String]>,
) -> Result<EvalReport> {
    if let Some(known) = train_climates {
        let seen: BTreeSet<&str> = splits
            .iter()
            .flat_map(|(_, refs)| refs.iter().map(|r| data.records[r.record].climate.as_str()))
            .collect();
        for c in seen {
            if !known.iter().any(|k| k == c) {
                log::warn!("climate '{c}' was not seen in training; evaluating zero-shot");
            }
        }
    }
    let scored = splits
        .iter()
        .filter(|(_, refs)| !refs.is_empty())
        .map(|(split, refs)| {
            Ok(Scored {
                split: *split,
                refs: refs.to_vec(),
                pred: predictor.predict(data, refs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    build_report(&predictor.name(), data, &scored, targets)
}

type GroupKey = (String, Split, String);

fn group_rows(data: &EvalData, s: &Scored) -> BTreeMap<GroupKey, Vec<usize>> {
    let mut groups: BTreeMap<GroupKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in s.refs.iter().enumerate() {
        let rec = &data.records[r.record];
        let month = rec.timestamps[r.target].format("%Y-%m").to_string();
        groups
            .entry((rec.building_id.clone(), s.split, month))
            .or_default()
            .push(i);
        groups
            .entry((rec.building_id.clone(), s.split, "all".into()))
            .or_default()
            .push(i);
    }
    groups
}

fn build_report(
    name: &str,
    data: &EvalData,
    scored: &[Scored],
    targets: &BTreeSet<String>,
) -> Result<EvalReport> {
    let climate_of: BTreeMap<&str, &str> = data
        .records
        .iter()
        .map(|r| (r.building_id.as_str(), r.climate.as_str()))
        .collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for s in scored {
        let truth: Vec<f64> = s.refs.iter().map(|&r| data.truth(r)).collect();
        let mut building_rmse = Vec::new();
        for ((building, split, month), idx) in group_rows(data, s) {
            let p: Vec<f64> = idx.iter().map(|&i| s.pred[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            let m = mape(&p, &t)?;
            let r = rmse(&p, &t)?;
            if month == "all" {
                building_rmse.push(r);
            }
            rows.push(EvalRow {
                climate: climate_of
                    .get(building.as_str())
                    .copied()
                    .unwrap_or("")
                    .to_string(),
                is_target: targets.contains(&building),
                building_id: building,
                split,
                month,
                rmse: r,
                mape: m.percent,
                n: idx.len(),
                mape_excluded: m.excluded,
                baseline_rmse: BTreeMap::new(),
                baseline_mape: BTreeMap::new(),
            });
        }
        let subset_rmse = |want: bool| -> Result<Option<f64>> {
            let idx: Vec<usize> = (0..s.refs.len())
                .filter(|&i| targets.contains(&data.records[s.refs[i].record].building_id) == want)
                .collect();
            if idx.is_empty() {
                return Ok(None);
            }
            let p: Vec<f64> = idx.iter().map(|&i| s.pred[i]).collect();
            let t: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            rmse(&p, &t).map(Some)
        };
        summary.push(SplitSummary {
            split: s.split,
            n: s.refs.len(),
            pooled_rmse: rmse(&s.pred, &truth)?,
            pooled_mape: mape(&s.pred, &truth)?.percent,
            mean_building_rmse: building_rmse.iter().sum::<f64>() / building_rmse.len() as f64,
            target_rmse: subset_rmse(true)?,
            non_target_rmse: subset_rmse(false)?,
            baseline_pooled_rmse: BTreeMap::new(),
            baseline_non_target_rmse: BTreeMap::new(),
        });
    }
    Ok(EvalReport {
        predictor: name.to_string(),
        mape_guard: MAPE_GUARD,
        summary,
        rows,
    })
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<&SplitSummary> {
        self.summary.iter().find(|s| s.split == split)
    }

    /// Copies the metrics of `other` (same windows, different predictor)
    /// into this report's baseline columns.
    pub fn attach_baseline(&mut self, other: &EvalReport) -> Result<()> {
        if other.rows.len() != self.rows.len() {
            return Err(Error::contract("baseline report covers different windows"));
        }
        let name = other.predictor.clone();
        for (row, b) in self.rows.iter_mut().zip(&other.rows) {
            if (&row.building_id, row.split, &row.month, row.n)
                != (&b.building_id, b.split, &b.month, b.n)
            {
                return Err(Error::contract("baseline report rows do not align"));
            }
            row.baseline_rmse.insert(name.clone(), b.rmse);
            row.baseline_mape.insert(name.clone(), b.mape);
        }
        for s in &mut self.summary {
            let b = other
                .split(s.split)
                .ok_or_else(|| Error::contract("baseline report lacks a split"))?;
            s.baseline_pooled_rmse.insert(name.clone(), b.pooled_rmse);
            s.baseline_non_target_rmse
                .insert(name.clone(), b.non_target_rmse);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Flat CSV: one row per (building, split, month), baseline columns
    /// appended in name order.
    pub fn to_csv(&self) -> Result<String> {
        let baselines: Vec<String> = self
            .rows
            .first()
            .map(|r| r.baseline_rmse.keys().cloned().collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "building_id",
            "climate",
            "split",
            "month",
            "rmse",
            "mape",
            "is_target",
        ]
        .map(String::from)
        .to_vec();
        for b in &baselines {
            header.push(format!("{b}_rmse"));
            header.push(format!("{b}_mape"));
        }
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.building_id.clone(),
                r.climate.clone(),
                r.split.as_str().to_string(),
                r.month.clone(),
                r.rmse.to_string(),
                opt(r.mape),
                r.is_target.to_string(),
            ];
            for b in &baselines {
                rec.push(
                    r.baseline_rmse
                        .get(b)
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                );
                rec.push(opt(r.baseline_mape.get(b).copied().flatten()));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write(&self, json: &Path, csv_path: &Path) -> Result<()> {
        std::fs::write(json, self.to_json()?)?;
        std::fs::write(csv_path, self.to_csv()?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub label: String,
    /// Pooled test RMSE per evaluation climate; `None` marks a missing checkpoint.
    pub rmse: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub eval_climates: Vec<String>,
    pub rows: Vec<TransferRow>,
}

/// Test-split references of the records tagged `climate`.
pub fn climate_test_refs(
    data: &EvalData,
    spec: &SplitSpec,
    context_length: usize,
    climate: &str,
) -> Result<Vec<WindowRef>> {
    let splits = make_splits(data.records, spec, context_length)?;
    Ok(splits
        .test
        .into_iter()
        .filter(|r| data.records[r.record].climate == climate)
        .collect())
}

/// Pooled test RMSE of each labelled predictor on each climate's test
/// windows, followed by a persistence row.
pub fn transfer_matrix(
    predictors: &[(String, Option<&dyn Predictor>)],
    data: &EvalData,
    spec: &SplitSpec,
    context_length: usize,
) -> Result<TransferMatrix> {
    let climates: Vec<String> = data
        .records
        .iter()
        .map(|r| r.climate.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if climates.len() < 2 {
        return Err(Error::config(format!(
            "a transfer matrix needs at least 2 climates, found {climates:?}"
        )));
    }
    let refs: Vec<Vec<WindowRef>> = climates
        .iter()
        .map(|c| climate_test_refs(data, spec, context_length, c))
        .collect::<Result<_>>()?;
    let cell = |p: &dyn Predictor, refs: &[WindowRef]| -> Result<Option<f64>> {
        if refs.is_empty() {
            return Ok(None);
        }
        let pred = p.predict(data, refs)?;
        let truth: Vec<f64> = refs.iter().map(|&r| data.truth(r)).collect();
        rmse(&pred, &truth).map(Some)
    };
    let mut rows = Vec::new();
    for (label, p) in predictors {
        let rmse = match p {
            Some(p) => refs.iter().map(|r| cell(*p, r)).collect::<Result<_>>()?,
            None => vec![None; climates.len()],
        };
        rows.push(TransferRow {
            label: label.clone(),
            rmse,
        });
    }
    rows.push(TransferRow {
        label: "persistence".into(),
        rmse: refs
            .iter()
            .map(|r| cell(&Persistence, r))
            .collect::<Result<_>>()?,
    });
    Ok(TransferMatrix {
        eval_climates: climates,
        rows,
    })
}

impl TransferMatrix {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["train".to_string()];
        header.extend(self.eval_climates.iter().cloned());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.label.clone()];
            rec.extend(
                row.rmse
                    .iter()
                    .map(|v| v.map(|x| x.to_string()).unwrap_or_else(|| "absent".into())),
            );
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::test_support::{building, hourly, jan1, record_from};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[21.0, 23.0], &[20.0, 24.0]).unwrap(), 1.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[20.0], &[20.0]).unwrap().percent, Some(0.0));
        assert_eq!(mape(&[22.0], &[20.0]).unwrap().percent, Some(10.0));
        assert_eq!(
            mape(&[19.0, 21.0], &[20.0, 20.0]).unwrap().percent,
            Some(5.0)
        );
        let g = mape(&[1.0, 22.0], &[0.05, 20.0]).unwrap();
        assert_eq!((g.percent, g.excluded), (Some(10.0), 1));
        assert_eq!(mape(&[1.0], &[0.0]).unwrap().percent, None);
    }

    proptest! {
        #[test]
        fn rmse_is_permutation_invariant(
            pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40),
            seed in any::<u64>(),
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let tp: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let a = rmse(&p, &t).unwrap();
            let b = rmse(&pp, &tp).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a));
            prop_assert!(a >= 0.0);
            prop_assert_eq!(rmse(&p, &p).unwrap(), 0.0);
        }
    }

    fn records(buildings: usize, len: usize) -> Vec<TimeSeriesRecord> {
        let mut out = Vec::new();
        for b in 0..buildings {
            for m in 1..=5u8 {
                let mut r = record_from(
                    (0..len)
                        .map(|i| 20.0 + ((i + b) as f64 * 0.2).sin())
                        .collect(),
                );
                r.building_id = format!("b{b}");
                r.hvac_mode = m;
                out.push(r);
            }
        }
        out
    }

    #[test]
    fn test_split_is_the_held_out_mode() {
        let recs = records(1, 60);
        let s = make_splits(&recs, &SplitSpec::default(), 10).unwrap();
        assert_eq!(s.test.len(), 50);
        assert!(s.test.iter().all(|r| recs[r.record].hvac_mode == 1));
        check_disjoint(&s).unwrap();
    }

    #[test]
    fn validation_takes_ten_percent_per_record() {
        let recs = records(2, 110);
        let s = make_splits(&recs, &SplitSpec::default(), 10).unwrap();
        for ri in 0..recs.len() {
            if recs[ri].hvac_mode == 1 {
                continue;
            }
            assert_eq!(s.validation.iter().filter(|r| r.record == ri).count(), 10);
            assert_eq!(s.train.iter().filter(|r| r.record == ri).count(), 90);
        }
        assert_eq!(s, make_splits(&recs, &SplitSpec::default(), 10).unwrap());
        let other = SplitSpec {
            seed: 1,
            ..SplitSpec::default()
        };
        assert_ne!(
            s.validation,
            make_splits(&recs, &other, 10).unwrap().validation
        );
    }

    #[test]
    fn short_records_still_get_a_validation_window() {
        let recs = records(1, 14);
        let s = make_splits(&recs, &SplitSpec::default(), 10).unwrap();
        assert_eq!(s.validation.len(), 4);
    }

    #[test]
    fn non_training_buildings_only_contribute_tests() {
        let recs = records(3, 40);
        let spec = SplitSpec {
            train_buildings: vec!["b1".into()],
            ..SplitSpec::default()
        };
        let s = make_splits(&recs, &spec, 10).unwrap();
        assert!(s
            .train
            .iter()
            .chain(&s.validation)
            .all(|r| recs[r.record].building_id == "b1"));
        assert_eq!(s.test.len(), 3 * 30);
        let bad = SplitSpec {
            train_buildings: vec!["zz".into()],
            ..SplitSpec::default()
        };
        assert!(make_splits(&recs, &bad, 10).is_err());
    }

    #[test]
    fn subsets_are_nested_and_seeded() {
        let ids: Vec<String> = (0..10).map(|i| format!("b{i}")).collect();
        let s = nested_subsets(&ids, &[1, 2, 4, 8], 5).unwrap();
        assert_eq!(s.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
        assert_eq!(s, nested_subsets(&ids, &[1, 2, 4, 8], 5).unwrap());
        assert!(nested_subsets(&ids, &[2, 1], 5).is_err());
        assert!(nested_subsets(&ids, &[11], 5).is_err());
        assert!(assert_nested(&[vec!["a".into()], vec!["b".into()]]).is_err());
    }

    fn statics_for(recs: &[TimeSeriesRecord]) -> BTreeMap<String, BuildingStatic> {
        recs.iter()
            .map(|r| (r.building_id.clone(), building()))
            .collect()
    }

    #[test]
    fn oracle_scores_zero_everywhere() {
        let recs = records(2, 24 * 40);
        let st = statics_for(&recs);
        let data = EvalData::new(&recs, &st);
        let s = make_splits(&recs, &SplitSpec::default(), 24).unwrap();
        let targets = BTreeSet::from(["b0".to_string()]);
        let rep = evaluate(
            &Oracle,
            &data,
            &[(Split::Test, &s.test), (Split::Validation, &s.validation)],
            &targets,
            None,
        )
        .unwrap();
        assert!(rep.rows.iter().all(|r| r.rmse == 0.0));
        let all_rows: Vec<_> = rep
            .rows
            .iter()
            .filter(|r| r.month == "all" && r.split == Split::Test)
            .collect();
        assert_eq!(all_rows.len(), 2);
        let months: BTreeSet<_> = rep
            .rows
            .iter()
            .filter(|r| r.month != "all")
            .map(|r| r.month.clone())
            .collect();
        assert_eq!(
            months,
            BTreeSet::from(["2023-01".to_string(), "2023-02".to_string()])
        );
        assert!(rep
            .rows
            .iter()
            .all(|r| r.is_target == (r.building_id == "b0")));
    }

    #[test]
    fn persistence_rmse_is_rms_of_true_change() {
        let recs = records(1, 80);
        let st = statics_for(&recs);
        let data = EvalData::new(&recs, &st);
        let s = make_splits(&recs, &SplitSpec::default(), 10).unwrap();
        let rep = evaluate(
            &Persistence,
            &data,
            &[(Split::Test, &s.test)],
            &BTreeSet::new(),
            None,
        )
        .unwrap();
        let deltas: Vec<f64> = s
            .test
            .iter()
            .map(|r| recs[r.record].t_in[r.target] - recs[r.record].t_in[r.target - 1])
            .collect();
        let expected = rmse(&deltas, &vec![0.0; deltas.len()]).unwrap();
        assert!((rep.summary[0].pooled_rmse - expected).abs() < 1e-12);
        let pred = Persistence.predict(&data, &s.test).unwrap();
        assert!(s
            .test
            .iter()
            .zip(&pred)
            .all(|(r, p)| *p == recs[r.record].t_in[r.target - 1]));
    }

    #[test]
    fn linear_ar_recovers_exact_linear_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 3;
        let k = 4;
        let d = n * 10 + 6 + k + 1;
        let truth: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let windows: Vec<WindowSample> = (0..20_000)
            .map(|i| {
                let mut w = WindowSample {
                    past: (0..n * 10).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    static_features: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
                    future: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    t_prev: 20.0,
                    target_delta: 0.0,
                    target_index: i + n,
                };
                w.target_delta = design_row(&w).iter().zip(&truth).map(|(x, b)| x * b).sum();
                w
            })
            .collect();
        let (weights, _) = LinearAr::fit_windows(&windows, DEFAULT_RIDGE).unwrap();
        let model = LinearAr {
            weights,
            ridge: DEFAULT_RIDGE,
            std: Standardizer::identity(),
            window: WindowConfig {
                context_length: n,
                forecast_weather: false,
            },
        };
        let pred: Vec<f64> = windows.iter().map(|w| model.predict_delta(w)).collect();
        let target: Vec<f64> = windows.iter().map(|w| w.target_delta).collect();
        let e = rmse(&pred, &target).unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn singular_system_raises_ridge() {
        // every feature zero except the bias: X'X is singular without ridge
        let w = WindowSample {
            past: vec![0.0; 20],
            static_features: [0.0; 6],
            future: vec![0.0; 4],
            t_prev: 0.0,
            target_delta: 0.5,
            target_index: 2,
        };
        let (weights, ridge) = LinearAr::fit_windows(&vec![w; 5], 0.0).unwrap();
        assert!(ridge > 0.0);
        assert!((weights.last().unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn baseline_columns_and_csv_layout() {
        let recs = records(1, 60);
        let st = statics_for(&recs);
        let data = EvalData::new(&recs, &st);
        let s = make_splits(&recs, &SplitSpec::default(), 10).unwrap();
        let splits = [(Split::Test, s.test.as_slice())];
        let mut rep = evaluate(&Oracle, &data, &splits, &BTreeSet::new(), None).unwrap();
        let base = evaluate(&Persistence, &data, &splits, &BTreeSet::new(), None).unwrap();
        rep.attach_baseline(&base).unwrap();
        let csv = rep.to_csv().unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "building_id,climate,split,month,rmse,mape,is_target,persistence_rmse,persistence_mape"
        );
        assert_eq!(rep.to_csv().unwrap(), csv);
        assert_eq!(
            rep.summary[0].baseline_pooled_rmse["persistence"],
            base.summary[0].pooled_rmse
        );
    }

    #[test]
    fn transfer_matrix_shape_and_persistence_row() {
        let mut recs = Vec::new();
        for (c, climate) in ["cold", "hot-humid", "marine"].iter().enumerate() {
            for m in 1..=5u8 {
                let mut r = record_from(
                    (0..50)
                        .map(|i| 18.0 + c as f64 + (i as f64 * 0.3).cos())
                        .collect(),
                );
                r.timestamps = hourly(jan1(), 50);
                r.building_id = format!("{climate}-000");
                r.climate = climate.to_string();
                r.hvac_mode = m;
                recs.push(r);
            }
        }
        let st = statics_for(&recs);
        let data = EvalData::new(&recs, &st);
        let entries: Vec<(String, Option<&dyn Predictor>)> = vec![
            ("cold".into(), Some(&Oracle)),
            ("hot-humid".into(), None),
            ("marine".into(), Some(&Persistence)),
        ];
        let m = transfer_matrix(&entries, &data, &SplitSpec::default(), 10).unwrap();
        assert_eq!(m.eval_climates.len(), 3);
        assert_eq!(m.rows.len(), 4);
        assert!(m.rows.iter().all(|r| r.rmse.len() == 3));
        assert_eq!(m.rows[0].rmse, vec![Some(0.0); 3]);
        assert_eq!(m.rows[1].rmse, vec![None; 3]);
        assert_eq!(m.rows[2].rmse, m.rows[3].rmse);
        let csv = m.to_csv().unwrap();
        assert!(csv.contains("hot-humid,absent,absent,absent"));
        let single: Vec<TimeSeriesRecord> =
            recs.into_iter().filter(|r| r.climate == "cold").collect();
        let st = statics_for(&single);
        assert!(transfer_matrix(
            &entries,
            &EvalData::new(&single, &st),
            &SplitSpec::default(),
            10
        )
        .is_err());
    }
}
