//! Raw records, static descriptors, and their conversion into model-ready
//! windows: derivative enrichment, standardization, and covariate assembly.

use std::f64::consts::PI;

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling interval of every record, in hours.
pub const DT_HOURS: f64 = 1.0;

/// Past-observed channels, in column order.
pub const RAW_CHANNELS: [&str; 5] = ["t_in", "t_out", "solar", "q_hvac", "q_occ"];
pub const N_RAW: usize = RAW_CHANNELS.len();
/// Raw channels followed by their time derivatives.
pub const N_PAST_FEATURES: usize = 2 * N_RAW;

pub const STATIC_NAMES: [&str; 6] = [
    "floor_area",
    "aspect_ratio",
    "wwr",
    "wall_r",
    "roof_r",
    "internal_gain_density",
];
pub const N_STATIC: usize = STATIC_NAMES.len();

/// Number of calendar covariates (hour-of-day and day-of-year, sin/cos).
pub const N_CALENDAR: usize = 4;

/// Standard deviation floor for time-series channels.
pub const STD_FLOOR: f64 = 1e-8;
/// Smallest static scale relative to the static mean magnitude.
pub const STATIC_RELATIVE_FLOOR: f64 = 0.25;

/// Time-invariant physical descriptors of one building.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildingStatic {
    /// m²
    pub floor_area: f64,
    /// length / width
    pub aspect_ratio: f64,
    /// window-to-wall ratio
    pub wwr: f64,
    /// m²·K/W
    pub wall_r: f64,
    /// m²·K/W
    pub roof_r: f64,
    /// W/m²
    pub internal_gain_density: f64,
}

impl BuildingStatic {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("floor_area", self.floor_area),
            ("aspect_ratio", self.aspect_ratio),
            ("wall_r", self.wall_r),
            ("roof_r", self.roof_r),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.wwr) {
            return Err(Error::config(format!(
                "wwr must lie in [0, 1], got {}",
                self.wwr
            )));
        }
        if !(self.internal_gain_density >= 0.0 && self.internal_gain_density.is_finite()) {
            return Err(Error::config(format!(
                "internal_gain_density must be >= 0, got {}",
                self.internal_gain_density
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; N_STATIC] {
        [
            self.floor_area,
            self.aspect_ratio,
            self.wwr,
            self.wall_r,
            self.roof_r,
            self.internal_gain_density,
        ]
    }
}

/// One building under one HVAC mode, sampled hourly.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesRecord {
    pub building_id: String,
    pub hvac_mode: u8,
    pub climate: String,
    pub timestamps: Vec<NaiveDateTime>,
    /// °C
    pub t_in: Vec<f64>,
    /// °C
    pub t_out: Vec<f64>,
    /// W/m²
    pub solar: Vec<f64>,
    /// W, heating positive
    pub q_hvac: Vec<f64>,
    /// W
    pub q_occ: Vec<f64>,
}

impl TimeSeriesRecord {
    pub fn len(&self) -> usize {
        self.t_in.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_in.is_empty()
    }

    /// Raw channel by index into [`RAW_CHANNELS`].
    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.t_in,
            1 => &self.t_out,
            2 => &self.solar,
            3 => &self.q_hvac,
            4 => &self.q_occ,
            _ => panic!("raw channel index {c} out of range"),
        }
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut Vec<f64> {
        match c {
            0 => &mut self.t_in,
            1 => &mut self.t_out,
            2 => &mut self.solar,
            3 => &mut self.q_hvac,
            4 => &mut self.q_occ,
            _ => panic!("raw channel index {c} out of range"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n < 3 {
            return Err(Error::InsufficientData { needed: 3, got: n });
        }
        if self.timestamps.len() != n || (0..N_RAW).any(|c| self.channel(c).len() != n) {
            return Err(Error::data(
                None,
                format!("{}: channel lengths differ", self.building_id),
            ));
        }
        if !(1..=5).contains(&self.hvac_mode) {
            return Err(Error::data(
                None,
                format!("hvac_mode {} not in 1..=5", self.hvac_mode),
            ));
        }
        for w in 1..n {
            let step = self.timestamps[w] - self.timestamps[w - 1];
            if step <= chrono::Duration::zero() {
                return Err(Error::data(
                    Some(w),
                    "timestamps are not strictly increasing",
                ));
            }
            if step != chrono::Duration::hours(1) {
                return Err(Error::data(
                    Some(w),
                    format!("expected an hourly step, got {step}"),
                ));
            }
        }
        for c in 0..N_RAW {
            if let Some(i) = self.channel(c).iter().position(|v| !v.is_finite()) {
                return Err(Error::data(
                    Some(i),
                    format!("non-finite {} value", RAW_CHANNELS[c]),
                ));
            }
        }
        Ok(())
    }
}

/// First derivative by centered differences in the interior, with one-sided
/// first-order differences at the two ends.
pub fn centered_difference(series: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = series.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    if !(dt > 0.0) {
        return Err(Error::config(format!("dt must be positive, got {dt}")));
    }
    let mut d = Vec::with_capacity(n);
    d.push((series[1] - series[0]) / dt);
    for i in 1..n - 1 {
        d.push((series[i + 1] - series[i - 1]) / (2.0 * dt));
    }
    d.push((series[n - 1] - series[n - 2]) / dt);
    Ok(d)
}

/// `[sin, cos]` of hour-of-day followed by `[sin, cos]` of day-of-year.
///
/// The day angle is `2π·(ordinal − 1)/365`.
pub fn calendar_features(ts: NaiveDateTime) -> [f64; N_CALENDAR] {
    let hour = 2.0 * PI * ts.hour() as f64 / 24.0;
    let day = 2.0 * PI * (ts.ordinal() - 1) as f64 / 365.0;
    [hour.sin(), hour.cos(), day.sin(), day.cos()]
}

/// Window geometry and the composition of the future-known covariates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub context_length: usize,
    /// Append standardized `t_out` and `solar` at the target hour, treated as
    /// a perfect weather forecast.
    pub forecast_weather: bool,
}

impl WindowConfig {
    pub fn future_dim(&self) -> usize {
        N_CALENDAR + if self.forecast_weather { 2 } else { 0 }
    }
}

/// Future-known covariates for target index `t` of `record`.
pub fn build_future_covariates(
    record: &TimeSeriesRecord,
    t: usize,
    cfg: &WindowConfig,
    std: &Standardizer,
) -> Vec<f64> {
    let mut v = calendar_features(record.timestamps[t]).to_vec();
    if cfg.forecast_weather {
        v.push(std.apply(1, record.t_out[t]));
        v.push(std.apply(2, record.solar[t]));
    }
    v
}

/// Per-channel affine normalization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// One entry per past feature column (raw channels, then derivatives).
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
}

impl Standardizer {
    /// No-op normalization, useful for tests and baselines that read raw units.
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; N_PAST_FEATURES],
            std: vec![1.0; N_PAST_FEATURES],
            static_mean: vec![0.0; N_STATIC],
            static_std: vec![1.0; N_STATIC],
        }
    }

    pub fn apply(&self, column: usize, v: f64) -> f64 {
        (v - self.mean[column]) / self.std[column]
    }

    pub fn invert(&self, column: usize, z: f64) -> f64 {
        z * self.std[column] + self.mean[column]
    }

    pub fn apply_static(&self, s: &BuildingStatic) -> [f64; N_STATIC] {
        let mut out = s.to_array();
        for (i, v) in out.iter_mut().enumerate() {
            *v = (*v - self.static_mean[i]) / self.static_std[i];
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mean.len() == N_PAST_FEATURES
            && self.std.len() == N_PAST_FEATURES
            && self.static_mean.len() == N_STATIC
            && self.static_std.len() == N_STATIC;
        if !ok {
            return Err(Error::config(
                "standardizer channel count does not match the feature layout",
            ));
        }
        if self.std.iter().chain(&self.static_std).any(|s| !(*s > 0.0)) {
            return Err(Error::config("standardizer has a non-positive scale"));
        }
        Ok(())
    }
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    let vals: Vec<f64> = values.collect();
    for v in &vals {
        n += 1;
        sum += v;
    }
    let mean = sum / n as f64;
    for v in &vals {
        sq += (v - mean) * (v - mean);
    }
    (mean, (sq / n as f64).sqrt())
}

/// Fits channel statistics over every point of the training records, and
/// static statistics over the distinct training buildings.
///
/// Time-series scales are floored at [`STD_FLOOR`]. A static descriptor that
/// is identical across all training buildings has no spread to normalize by;
/// it is centered and scaled by `max(|mean|, 1)` so unseen buildings map to
/// bounded values. Other static scales are floored at
/// [`STATIC_RELATIVE_FLOOR`] times the mean magnitude, so a handful of
/// similar training buildings does not blow up the values of unseen ones.
pub fn fit_standardizer(
    records: &[&TimeSeriesRecord],
    statics: &[BuildingStatic],
) -> Result<Standardizer> {
    if records.is_empty() || statics.is_empty() {
        return Err(Error::contract(
            "cannot fit a standardizer on an empty training set",
        ));
    }
    let mut mean = vec![0.0; N_PAST_FEATURES];
    let mut std = vec![0.0; N_PAST_FEATURES];
    for c in 0..N_RAW {
        let (m, s) = mean_std(records.iter().flat_map(|r| r.channel(c).iter().copied()));
        mean[c] = m;
        std[c] = s.max(STD_FLOOR);
        let derivs: Vec<Vec<f64>> = records
            .iter()
            .map(|r| centered_difference(r.channel(c), DT_HOURS))
            .collect::<Result<_>>()?;
        let (m, s) = mean_std(derivs.iter().flatten().copied());
        mean[N_RAW + c] = m;
        std[N_RAW + c] = s.max(STD_FLOOR);
    }
    let mut static_mean = vec![0.0; N_STATIC];
    let mut static_std = vec![0.0; N_STATIC];
    for i in 0..N_STATIC {
        let (m, s) = mean_std(statics.iter().map(|b| b.to_array()[i]));
        static_mean[i] = m;
        static_std[i] = if s > STD_FLOOR {
            s.max(STATIC_RELATIVE_FLOOR * m.abs())
        } else {
            m.abs().max(1.0)
        };
    }
    Ok(Standardizer {
        mean,
        std,
        static_mean,
        static_std,
    })
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[context_length × N_PAST_FEATURES]`, row-major, standardized.
    pub past: Vec<f64>,
    pub static_features: [f64; N_STATIC],
    pub future: Vec<f64>,
    /// Last observed indoor temperature, °C.
    pub t_prev: f64,
    /// `t_in[t] − t_in[t−1]`, °C.
    pub target_delta: f64,
    /// Index `t` of the predicted hour within its record.
    pub target_index: usize,
}

impl WindowSample {
    pub fn context_length(&self) -> usize {
        self.past.len() / N_PAST_FEATURES
    }

    pub fn target_temperature(&self) -> f64 {
        self.t_prev + self.target_delta
    }

    pub fn is_finite(&self) -> bool {
        self.past
            .iter()
            .chain(&self.static_features)
            .chain(&self.future)
            .chain([&self.t_prev, &self.target_delta])
            .all(|v| v.is_finite())
    }
}

/// Derivative of a window; two-point windows get the one-sided slope at both ends.
pub(crate) fn window_derivative(window: &[f64]) -> Result<Vec<f64>> {
    if window.len() == 2 {
        let d = (window[1] - window[0]) / DT_HOURS;
        return Ok(vec![d, d]);
    }
    centered_difference(window, DT_HOURS)
}

/// Standardized past block for the rows `raw[..][t-n..t]`. Derivatives are
/// taken within the window so nothing at or after `t` is read.
pub fn past_block(
    raw: [&[f64]; N_RAW],
    t: usize,
    n: usize,
    std: &Standardizer,
) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::config(format!(
            "context length must be >= 2, got {n}"
        )));
    }
    if t < n {
        return Err(Error::InsufficientData {
            needed: n + 1,
            got: t + 1,
        });
    }
    let mut past = vec![0.0; n * N_PAST_FEATURES];
    for (c, series) in raw.iter().enumerate() {
        let window = &series[t - n..t];
        let deriv = window_derivative(window)?;
        for i in 0..n {
            past[i * N_PAST_FEATURES + c] = std.apply(c, window[i]);
            past[i * N_PAST_FEATURES + N_RAW + c] = std.apply(N_RAW + c, deriv[i]);
        }
    }
    Ok(past)
}

/// Window whose prediction target is index `t`.
pub fn window_at(
    record: &TimeSeriesRecord,
    static_features: &[f64; N_STATIC],
    std: &Standardizer,
    cfg: &WindowConfig,
    t: usize,
) -> Result<WindowSample> {
    let n = cfg.context_length;
    if t >= record.len() {
        return Err(Error::contract(format!(
            "target index {t} beyond record of length {}",
            record.len()
        )));
    }
    let raw = [
        record.t_in.as_slice(),
        &record.t_out,
        &record.solar,
        &record.q_hvac,
        &record.q_occ,
    ];
    let past = past_block(raw, t, n, std)?;
    Ok(WindowSample {
        past,
        static_features: *static_features,
        future: build_future_covariates(record, t, cfg, std),
        t_prev: record.t_in[t - 1],
        target_delta: record.t_in[t] - record.t_in[t - 1],
        target_index: t,
    })
}

/// Every window of `record`, one per target index in `n..len`.
pub fn assemble_windows(
    record: &TimeSeriesRecord,
    building: &BuildingStatic,
    std: &Standardizer,
    cfg: &WindowConfig,
) -> Result<Vec<WindowSample>> {
    let n = cfg.context_length;
    if record.len() < n + 1 {
        return Err(Error::InsufficientData {
            needed: n + 1,
            got: record.len(),
        });
    }
    let s = std.apply_static(building);
    (n..record.len())
        .map(|t| window_at(record, &s, std, cfg, t))
        .collect()
}

/// Number of windows `record` yields for a context of `n`.
pub fn window_count(record: &TimeSeriesRecord, n: usize) -> usize {
    record.len().saturating_sub(n)
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use chrono::NaiveDate;

    pub fn hourly(start: NaiveDateTime, n: usize) -> Vec<NaiveDateTime> {
        (0..n)
            .map(|i| start + chrono::Duration::hours(i as i64))
            .collect()
    }

    pub fn jan1() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2023, 1, 1)
            .unwrap()
            .and_hms_opt(0, 0, 0)
            .unwrap()
    }

    pub fn record_from(t_in: Vec<f64>) -> TimeSeriesRecord {
        let n = t_in.len();
        TimeSeriesRecord {
            building_id: "b0".into(),
            hvac_mode: 2,
            climate: "hot-humid".into(),
            timestamps: hourly(jan1(), n),
            t_out: (0..n).map(|i| 10.0 + (i as f64 * 0.3).sin()).collect(),
            solar: (0..n)
                .map(|i| 100.0 * (i as f64 * 0.2).cos().max(0.0))
                .collect(),
            q_hvac: (0..n).map(|i| 50.0 * (i % 3) as f64).collect(),
            q_occ: vec![300.0; n],
            t_in,
        }
    }

    pub fn building() -> BuildingStatic {
        BuildingStatic {
            floor_area: 150.0,
            aspect_ratio: 1.5,
            wwr: 0.2,
            wall_r: 3.0,
            roof_r: 5.0,
            internal_gain_density: 4.0,
        }
    }
}
