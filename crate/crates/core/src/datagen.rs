//! Synthetic building data: a single-zone 1R1C thermal model driven by
//! generated weather under five HVAC control modes, plus CSV/JSON I/O for
//! records and building statics.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BuildingStatic, TimeSeriesRecord};
use crate::seed::derive_seed;

pub const CSV_HEADER: [&str; 9] = [
    "timestamp",
    "building_id",
    "hvac_mode",
    "climate",
    "t_in",
    "t_out",
    "solar",
    "q_hvac",
    "q_occ",
];
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const STATICS_FILE: &str = "statics.json";
pub const CLIMATES: [&str; 3] = ["hot-humid", "marine", "cold"];
pub const HVAC_MODES: [u8; 5] = [1, 2, 3, 4, 5];

pub const SUBSTEPS_PER_HOUR: usize = 10;
pub const SUBSTEP_SECONDS: f64 = 3600.0 / SUBSTEPS_PER_HOUR as f64;
pub const MIN_HOURS: usize = 72;
pub const DEFAULT_SPINUP_HOURS: usize = 48;

const STOREY_HEIGHT: f64 = 2.7;
const WINDOW_U: f64 = 3.0;
const AIR_DENSITY: f64 = 1.2;
const AIR_HEAT_CAPACITY: f64 = 1005.0;
const AIR_CHANGES_PER_HOUR: f64 = 0.5;
/// Effective thermal mass per floor area, J/(K·m²).
const MASS_PER_AREA: f64 = 150e3;
/// Plant size as a multiple of UA (W per K of design difference).
const CAPACITY_DESIGN_DELTA: f64 = 30.0;
/// Proportional band of the mode-1 thermostat, K: full output at this
/// distance beyond the setpoint.
const THERMOSTAT_BAND: f64 = 0.25;
const TRACKING_CAPACITY_FRACTION: f64 = 0.5;
const MODE5_DEVIATION_PROB: f64 = 0.6;
const MODE5_FACTOR_RANGE: (f64, f64) = (0.3, 1.7);
const T_MIN: f64 = -40.0;
const T_MAX: f64 = 60.0;

/// Fraction of peak occupancy gain by hour of day.
pub const OCCUPANCY_SCHEDULE: [f64; 24] = [
    0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.8, 0.7, 0.5, 0.3, 0.3, 0.3, //
    0.4, 0.3, 0.3, 0.3, 0.4, 0.7, 0.9, 1.0, 1.0, 1.0, 1.0, 0.9,
];

/// Sampling ranges for building statics, inclusive.
pub const FLOOR_AREA_RANGE: (f64, f64) = (80.0, 250.0);
pub const ASPECT_RATIO_RANGE: (f64, f64) = (1.0, 3.0);
pub const WWR_RANGE: (f64, f64) = (0.1, 0.4);
pub const WALL_R_RANGE: (f64, f64) = (1.0, 5.0);
pub const ROOF_R_RANGE: (f64, f64) = (2.0, 8.0);
pub const GAIN_DENSITY_RANGE: (f64, f64) = (2.0, 8.0);
pub const HEAT_SETPOINT_RANGE: (f64, f64) = (19.0, 21.0);
pub const COOL_SETPOINT_RANGE: (f64, f64) = (23.0, 26.0);

/// Derived thermal parameters of one single-zone building.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcBuilding {
    pub id: String,
    pub climate: String,
    pub statics: BuildingStatic,
    /// J/K
    pub capacitance: f64,
    /// K/W
    pub resistance: f64,
    /// m², multiplied by irradiance and wwr
    pub solar_aperture: f64,
    pub setpoint_heat: f64,
    pub setpoint_cool: f64,
    /// W
    pub hvac_capacity: f64,
}

impl RcBuilding {
    /// Derives C, R, aperture and plant size from the statics.
    pub fn from_static(
        id: impl Into<String>,
        climate: impl Into<String>,
        statics: BuildingStatic,
        setpoint_heat: f64,
        setpoint_cool: f64,
    ) -> Result<Self> {
        statics.validate()?;
        let area = statics.floor_area;
        let length = (area * statics.aspect_ratio).sqrt();
        let width = (area / statics.aspect_ratio).sqrt();
        let wall_area = 2.0 * (length + width) * STOREY_HEIGHT;
        let window_area = statics.wwr * wall_area;
        let opaque_area = wall_area - window_area;
        let volume = area * STOREY_HEIGHT;
        let infiltration = AIR_DENSITY * AIR_HEAT_CAPACITY * volume * AIR_CHANGES_PER_HOUR / 3600.0;
        let ua = opaque_area / statics.wall_r
            + window_area * WINDOW_U
            + area / statics.roof_r
            + infiltration;
        let b = Self {
            id: id.into(),
            climate: climate.into(),
            statics,
            capacitance: area * MASS_PER_AREA,
            resistance: 1.0 / ua,
            solar_aperture: 0.1 * wall_area,
            setpoint_heat,
            setpoint_cool,
            hvac_capacity: ua * CAPACITY_DESIGN_DELTA,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacitance > 0.0 && self.resistance > 0.0) {
            return Err(Error::config(format!(
                "{}: C and R must be positive",
                self.id
            )));
        }
        if !(self.hvac_capacity >= 0.0) {
            return Err(Error::config(format!(
                "{}: negative HVAC capacity",
                self.id
            )));
        }
        if !(self.setpoint_heat < self.setpoint_cool) {
            return Err(Error::config(format!(
                "{}: heating setpoint {} not below cooling setpoint {}",
                self.id, self.setpoint_heat, self.setpoint_cool
            )));
        }
        let tau = self.resistance * self.capacitance;
        if SUBSTEP_SECONDS >= tau / 2.0 {
            return Err(Error::config(format!(
                "{}: Euler substep {SUBSTEP_SECONDS} s is unstable for RC = {tau:.0} s",
                self.id
            )));
        }
        let loop_gain = SUBSTEP_SECONDS
            * (1.0 / self.resistance + self.hvac_capacity / THERMOSTAT_BAND)
            / self.capacitance;
        if loop_gain >= 1.0 {
            return Err(Error::config(format!(
                "{}: thermostat loop gain {loop_gain:.2} per substep would oscillate",
                self.id
            )));
        }
        Ok(())
    }

    /// Peak occupancy gain, W.
    pub fn occupancy_peak(&self) -> f64 {
        self.statics.internal_gain_density * self.statics.floor_area
    }
}

/// Synthetic weather generator for one climate region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimateProfile {
    pub tag: String,
    /// °C
    pub mean: f64,
    /// °C, half the winter-summer swing
    pub seasonal_amplitude: f64,
    /// °C, half the night-day swing
    pub diurnal_amplitude: f64,
    /// °C, stationary std of the AR(1) anomaly
    pub noise_std: f64,
    /// Hourly AR(1) coefficient of the anomaly.
    pub noise_persistence: f64,
    /// W/m² at solar noon on a clear midsummer day
    pub solar_peak: f64,
    /// Relative winter reduction of the solar peak, in [0, 1].
    pub solar_seasonal: f64,
    /// Maximum fraction of daily irradiance removed by cloud, in [0, 1].
    pub cloudiness: f64,
    pub seed: u64,
}

impl ClimateProfile {
    pub fn hot_humid(seed: u64) -> Self {
        Self {
            tag: "hot-humid".into(),
            mean: 20.0,
            seasonal_amplitude: 10.0,
            diurnal_amplitude: 5.0,
            noise_std: 1.5,
            noise_persistence: 0.95,
            solar_peak: 850.0,
            solar_seasonal: 0.3,
            cloudiness: 0.5,
            seed,
        }
    }

    pub fn marine(seed: u64) -> Self {
        Self {
            tag: "marine".into(),
            mean: 15.0,
            seasonal_amplitude: 4.0,
            diurnal_amplitude: 4.0,
            noise_std: 1.0,
            noise_persistence: 0.95,
            solar_peak: 750.0,
            solar_seasonal: 0.4,
            cloudiness: 0.6,
            seed,
        }
    }

    pub fn cold(seed: u64) -> Self {
        Self {
            tag: "cold".into(),
            mean: 8.0,
            seasonal_amplitude: 14.0,
            diurnal_amplitude: 6.0,
            noise_std: 2.0,
            noise_persistence: 0.95,
            solar_peak: 700.0,
            solar_seasonal: 0.5,
            cloudiness: 0.6,
            seed,
        }
    }

    pub fn from_tag(tag: &str, seed: u64) -> Result<Self> {
        match tag {
            "hot-humid" => Ok(Self::hot_humid(seed)),
            "marine" => Ok(Self::marine(seed)),
            "cold" => Ok(Self::cold(seed)),
            other => Err(Error::config(format!(
                "unknown climate '{other}', expected one of {CLIMATES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            self.seasonal_amplitude,
            self.diurnal_amplitude,
            self.noise_std,
            self.solar_peak,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config(format!(
                "{}: amplitudes must be >= 0",
                self.tag
            )));
        }
        let unit = [self.solar_seasonal, self.cloudiness, self.noise_persistence];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!(
                "{}: solar_seasonal, cloudiness and noise_persistence must lie in [0, 1]",
                self.tag
            )));
        }
        Ok(())
    }

    /// Hourly outdoor temperature and horizontal irradiance for `hours`
    /// points from `start`. Deterministic in (`seed`, `start`); a longer
    /// request extends a shorter one.
    pub fn weather(&self, start: NaiveDateTime, hours: usize) -> Forcing {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let innovation = self.noise_std * (1.0 - self.noise_persistence.powi(2)).sqrt();
        let mut anomaly = self.noise_std * standard_normal(&mut rng);
        let mut cloud = 1.0;
        let mut day = None;
        let mut t_out = Vec::with_capacity(hours);
        let mut solar = Vec::with_capacity(hours);
        for k in 0..hours {
            let ts = start + chrono::Duration::hours(k as i64);
            let doy = ts.ordinal() as f64;
            let hour = ts.hour() as f64;
            if day != Some(ts.date()) {
                day = Some(ts.date());
                cloud = 1.0 - self.cloudiness * rng.random::<f64>();
            }
            if k > 0 {
                anomaly = self.noise_persistence * anomaly + innovation * standard_normal(&mut rng);
            }
            t_out.push(
                self.mean - self.seasonal_amplitude * (2.0 * PI * (doy - 15.0) / 365.0).cos()
                    + self.diurnal_amplitude * (2.0 * PI * (hour - 15.0) / 24.0).cos()
                    + anomaly,
            );
            let season =
                1.0 - self.solar_seasonal * 0.5 * (1.0 + (2.0 * PI * (doy + 10.0) / 365.0).cos());
            let elevation = (PI * (hour - 6.0) / 12.0).sin().max(0.0);
            solar.push(self.solar_peak * season * elevation * cloud);
        }
        Forcing { t_out, solar }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Hourly boundary conditions: outdoor temperature (°C) and irradiance (W/m²).
#[derive(Clone, Debug, PartialEq)]
pub struct Forcing {
    pub t_out: Vec<f64>,
    pub solar: Vec<f64>,
}

impl Forcing {
    pub fn constant(t_out: f64, solar: f64, hours: usize) -> Self {
        Self {
            t_out: vec![t_out; hours],
            solar: vec![solar; hours],
        }
    }

    pub fn len(&self) -> usize {
        self.t_out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_out.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    /// Timestamp of the first reported hour.
    pub start: NaiveDateTime,
    /// Simulated hours discarded before `start`.
    pub spinup_hours: usize,
    /// Starting temperature at the beginning of spin-up; defaults to the
    /// first outdoor temperature clamped into the setpoint band.
    pub initial_temperature: Option<f64>,
    pub occupancy_schedule: [f64; 24],
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            start: default_start(),
            spinup_hours: DEFAULT_SPINUP_HOURS,
            initial_temperature: None,
            occupancy_schedule: OCCUPANCY_SCHEDULE,
        }
    }
}

pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2023, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

/// A simulated record plus the per-hour HVAC scale factors (mode 5; 1.0
/// elsewhere) that applied during the hour ending at each reported point.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub record: TimeSeriesRecord,
    pub scale_factors: Vec<f64>,
    pub deviated: Vec<bool>,
}

pub fn validate_mode(mode: u8) -> Result<()> {
    if HVAC_MODES.contains(&mode) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "unknown HVAC mode {mode}, expected 1..=5"
        )))
    }
}

/// Simulates `hours` reported hours with the climate's generated weather.
pub fn simulate(
    building: &RcBuilding,
    climate: &ClimateProfile,
    mode: u8,
    hours: usize,
    seed: u64,
) -> Result<TimeSeriesRecord> {
    let opts = SimOptions::default();
    let origin = opts.start - chrono::Duration::hours(opts.spinup_hours as i64);
    let forcing = climate.weather(origin, opts.spinup_hours + hours);
    Ok(simulate_with(building, &forcing, &climate.tag, mode, hours, &opts, seed)?.record)
}

/// Core integrator. `forcing` covers spin-up plus the reported span, one
/// value per hour.
pub fn simulate_with(
    building: &RcBuilding,
    forcing: &Forcing,
    climate: &str,
    mode: u8,
    hours: usize,
    opts: &SimOptions,
    seed: u64,
) -> Result<SimTrace> {
    validate_mode(mode)?;
    building.validate()?;
    if hours < MIN_HOURS {
        return Err(Error::config(format!(
            "simulate needs at least {MIN_HOURS} hours, got {hours}"
        )));
    }
    let total = opts.spinup_hours + hours;
    if forcing.t_out.len() < total || forcing.solar.len() < total {
        return Err(Error::contract(format!(
            "forcing covers {} hours, simulation needs {total}",
            forcing.len().min(forcing.solar.len())
        )));
    }
    let origin = opts.start - chrono::Duration::hours(opts.spinup_hours as i64);
    let c = building.capacitance;
    let r = building.resistance;
    let dt = SUBSTEP_SECONDS;
    let (sp_heat, sp_cool) = (building.setpoint_heat, building.setpoint_cool);
    let capacity = building.hvac_capacity;
    let solar_gain = building.solar_aperture * building.statics.wwr;
    let occ_peak = building.occupancy_peak();
    let occupancy = |k: i64| {
        let ts = origin + chrono::Duration::hours(k);
        occ_peak * opts.occupancy_schedule[ts.hour() as usize]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut temp = opts
        .initial_temperature
        .unwrap_or_else(|| forcing.t_out[0].clamp(sp_heat, sp_cool));

    let mut t_in = vec![temp; total];
    let mut q_hvac = vec![0.0; total];
    let mut q_occ = vec![occupancy(-1); total];
    let mut factors = vec![1.0; total];
    let mut deviated = vec![false; total];

    for j in 0..total - 1 {
        let factor = if mode == 5 && rng.random::<f64>() < MODE5_DEVIATION_PROB {
            deviated[j + 1] = true;
            rng.random_range(MODE5_FACTOR_RANGE.0..=MODE5_FACTOR_RANGE.1)
        } else {
            1.0
        };
        factors[j + 1] = factor;
        let gain_occ = occupancy(j as i64);
        let mut hvac_sum = 0.0;
        for s in 0..SUBSTEPS_PER_HOUR {
            let frac = s as f64 / SUBSTEPS_PER_HOUR as f64;
            let t_out = forcing.t_out[j] + frac * (forcing.t_out[j + 1] - forcing.t_out[j]);
            let irr = forcing.solar[j] + frac * (forcing.solar[j + 1] - forcing.solar[j]);
            let free_flux = (t_out - temp) / r + solar_gain * irr + gain_occ;
            let free_next = temp + dt / c * free_flux;
            let ideal = if free_next < sp_heat {
                c / dt * (sp_heat - free_next)
            } else if free_next > sp_cool {
                c / dt * (sp_cool - free_next)
            } else {
                0.0
            };
            let q = match mode {
                1 => {
                    let heat = ((sp_heat - temp) / THERMOSTAT_BAND).clamp(0.0, 1.0);
                    let cool = ((temp - sp_cool) / THERMOSTAT_BAND).clamp(0.0, 1.0);
                    capacity * (heat - cool)
                }
                2 => ideal,
                3 => {
                    let cap = TRACKING_CAPACITY_FRACTION * capacity;
                    ideal.clamp(-cap, cap)
                }
                4 => 0.0,
                5 => factor * ideal,
                _ => unreachable!("mode validated above"),
            };
            temp = if mode == 2 && q != 0.0 {
                // pin exactly to the violated setpoint
                if q > 0.0 {
                    sp_heat
                } else {
                    sp_cool
                }
            } else {
                free_next + dt / c * q
            };
            hvac_sum += q;
        }
        if !temp.is_finite() {
            return Err(Error::NumericFault(format!(
                "{}: non-finite indoor temperature at simulated hour {}",
                building.id,
                j + 1
            )));
        }
        if !(T_MIN..=T_MAX).contains(&temp) {
            return Err(Error::NumericFault(format!(
                "{}: indoor temperature {temp:.2} °C outside physical bounds at simulated hour {}",
                building.id,
                j + 1
            )));
        }
        t_in[j + 1] = temp;
        q_hvac[j + 1] = hvac_sum / SUBSTEPS_PER_HOUR as f64;
        q_occ[j + 1] = gain_occ;
    }

    let s = opts.spinup_hours;
    let record = TimeSeriesRecord {
        building_id: building.id.clone(),
        hvac_mode: mode,
        climate: climate.to_string(),
        timestamps: (0..hours)
            .map(|k| opts.start + chrono::Duration::hours(k as i64))
            .collect(),
        t_in: t_in[s..].to_vec(),
        t_out: forcing.t_out[s..total].to_vec(),
        solar: forcing.solar[s..total].to_vec(),
        q_hvac: q_hvac[s..].to_vec(),
        q_occ: q_occ[s..].to_vec(),
    };
    Ok(SimTrace {
        record,
        scale_factors: factors[s..].to_vec(),
        deviated: deviated[s..].to_vec(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    rng.random_range(range.0..=range.1)
}

/// Draws `n` buildings with ids `{climate}-000`, `{climate}-001`, ...
pub fn sample_buildings(n: usize, climate: &ClimateProfile, seed: u64) -> Result<Vec<RcBuilding>> {
    if n < 1 {
        return Err(Error::config("sample_buildings needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let statics = BuildingStatic {
                floor_area: uniform(&mut rng, FLOOR_AREA_RANGE),
                aspect_ratio: uniform(&mut rng, ASPECT_RATIO_RANGE),
                wwr: uniform(&mut rng, WWR_RANGE),
                wall_r: uniform(&mut rng, WALL_R_RANGE),
                roof_r: uniform(&mut rng, ROOF_R_RANGE),
                internal_gain_density: uniform(&mut rng, GAIN_DENSITY_RANGE),
            };
            let heat = uniform(&mut rng, HEAT_SETPOINT_RANGE);
            let cool = uniform(&mut rng, COOL_SETPOINT_RANGE);
            RcBuilding::from_static(
                format!("{}-{i:03}", climate.tag),
                &climate.tag,
                statics,
                heat,
                cool,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Buildings per climate tag.
    pub counts: BTreeMap<String, usize>,
    pub modes: Vec<u8>,
    /// Reported hours per record.
    pub hours: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            counts: BTreeMap::from([("hot-humid".to_string(), 10)]),
            modes: HVAC_MODES.to_vec(),
            hours: 24 * 181,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() {
            return Err(Error::config("dataset needs at least one climate"));
        }
        for (tag, &n) in &self.counts {
            ClimateProfile::from_tag(tag, 0)?;
            if n < 1 {
                return Err(Error::config(format!(
                    "climate {tag}: building count must be >= 1"
                )));
            }
        }
        if self.modes.is_empty() {
            return Err(Error::config("dataset needs at least one HVAC mode"));
        }
        for &m in &self.modes {
            validate_mode(m)?;
        }
        if self.hours < MIN_HOURS {
            return Err(Error::config(format!("hours must be >= {MIN_HOURS}")));
        }
        Ok(())
    }

    pub fn climate(&self, tag: &str) -> Result<ClimateProfile> {
        ClimateProfile::from_tag(tag, derive_seed(self.seed, &format!("weather/{tag}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub buildings: Vec<RcBuilding>,
    pub records: Vec<TimeSeriesRecord>,
}

impl Dataset {
    pub fn statics(&self) -> BTreeMap<String, BuildingStatic> {
        self.buildings
            .iter()
            .map(|b| (b.id.clone(), b.statics))
            .collect()
    }
}

/// One record per (building, mode), buildings ordered by climate tag then
/// index, modes in the order given. Weather is shared within a climate.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut buildings = Vec::new();
    let mut jobs = Vec::new();
    for (tag, &n) in &spec.counts {
        let climate = spec.climate(tag)?;
        let sampled = sample_buildings(
            n,
            &climate,
            derive_seed(spec.seed, &format!("buildings/{tag}")),
        )?;
        let opts = SimOptions::default();
        let origin = opts.start - chrono::Duration::hours(opts.spinup_hours as i64);
        let forcing = std::sync::Arc::new(climate.weather(origin, opts.spinup_hours + spec.hours));
        for b in &sampled {
            for &m in &spec.modes {
                jobs.push((b.clone(), m, forcing.clone()));
            }
        }
        buildings.extend(sampled);
    }
    let records = jobs
        .par_iter()
        .map(|(b, m, forcing)| {
            let seed = derive_seed(spec.seed, &format!("hvac/{}/mode{m}", b.id));
            simulate_with(
                b,
                forcing,
                &b.climate,
                *m,
                spec.hours,
                &SimOptions::default(),
                seed,
            )
            .map(|t| t.record)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { buildings, records })
}

pub fn record_file_name(record: &TimeSeriesRecord) -> String {
    format!("{}_mode{}.csv", record.building_id, record.hvac_mode)
}

pub fn write_record_csv(record: &TimeSeriesRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    let mode = record.hvac_mode.to_string();
    for i in 0..record.len() {
        w.write_record([
            record.timestamps[i].format(TIMESTAMP_FORMAT).to_string(),
            record.building_id.clone(),
            mode.clone(),
            record.climate.clone(),
            record.t_in[i].to_string(),
            record.t_out[i].to_string(),
            record.solar[i].to_string(),
            record.q_hvac[i].to_string(),
            record.q_occ[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates one record CSV. Rows are numbered from 0, excluding
/// the header.
pub fn ingest_csv(path: &Path) -> Result<TimeSeriesRecord> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; CSV_HEADER.len()];
    for (k, name) in CSV_HEADER.iter().enumerate() {
        col[k] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column '{name}'", path.display())))?;
    }
    let mut record = TimeSeriesRecord {
        building_id: String::new(),
        hvac_mode: 0,
        climate: String::new(),
        timestamps: Vec::new(),
        t_in: Vec::new(),
        t_out: Vec::new(),
        solar: Vec::new(),
        q_hvac: Vec::new(),
        q_occ: Vec::new(),
    };
    for (row, result) in rdr.records().enumerate() {
        let rec = result?;
        let field = |k: usize| rec.get(col[k]).unwrap_or("").trim();
        let ts = NaiveDateTime::parse_from_str(field(0), TIMESTAMP_FORMAT)
            .map_err(|e| Error::data(Some(row), format!("bad timestamp '{}': {e}", field(0))))?;
        let mode: u8 = field(2)
            .parse()
            .map_err(|_| Error::data(Some(row), format!("bad hvac_mode '{}'", field(2))))?;
        if row == 0 {
            record.building_id = field(1).to_string();
            record.hvac_mode = mode;
            record.climate = field(3).to_string();
        } else if field(1) != record.building_id
            || mode != record.hvac_mode
            || field(3) != record.climate
        {
            return Err(Error::data(
                Some(row),
                "building_id, hvac_mode and climate must be constant within a file",
            ));
        }
        record.timestamps.push(ts);
        for (k, c) in (4..9).zip(0..) {
            let text = field(k);
            let v: f64 = text.parse().map_err(|_| {
                Error::data(
                    Some(row),
                    format!("cannot parse {} value '{text}'", CSV_HEADER[k]),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::data(
                    Some(row),
                    format!("non-finite {} value", CSV_HEADER[k]),
                ));
            }
            record.channel_mut(c).push(v);
        }
    }
    record.validate()?;
    Ok(record)
}

pub fn write_statics(statics: &BTreeMap<String, BuildingStatic>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(statics)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_statics(path: &Path) -> Result<BTreeMap<String, BuildingStatic>> {
    let text = fs::read_to_string(path)?;
    let statics: BTreeMap<String, BuildingStatic> = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    for (id, s) in &statics {
        s.validate()
            .map_err(|e| Error::Schema(format!("{}: building {id}: {e}", path.display())))?;
    }
    Ok(statics)
}

/// Writes every record and the statics file into `dir`; returns the written
/// paths in a stable order.
pub fn write_dataset(
    dir: &Path,
    records: &[TimeSeriesRecord],
    statics: &BTreeMap<String, BuildingStatic>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths: Vec<PathBuf> = records
        .iter()
        .map(|r| dir.join(record_file_name(r)))
        .collect();
    records
        .par_iter()
        .zip(&paths)
        .try_for_each(|(r, p)| write_record_csv(r, p))?;
    let sp = dir.join(STATICS_FILE);
    write_statics(statics, &sp)?;
    paths.push(sp);
    Ok(paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub records: Vec<TimeSeriesRecord>,
    pub statics: BTreeMap<String, BuildingStatic>,
}

/// Reads every `*.csv` in `dir` (sorted by file name) and the statics file.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    if !dir.is_dir() {
        return Err(Error::data(
            None,
            format!("dataset directory {} does not exist", dir.display()),
        ));
    }
    let statics = read_statics(&dir.join(STATICS_FILE))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::data(
            None,
            format!("no CSV records in {}", dir.display()),
        ));
    }
    let records = files
        .par_iter()
        .map(|p| {
            ingest_csv(p).map_err(|e| match e {
                Error::Data { row, msg } => Error::data(row, format!("{}: {msg}", p.display())),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for r in &records {
        if !statics.contains_key(&r.building_id) {
            return Err(Error::Schema(format!(
                "building {} has a record but no entry in {STATICS_FILE}",
                r.building_id
            )));
        }
    }
    Ok(LoadedDataset { records, statics })
}
