//! Shared fixtures for the kernel benchmarks.

use thermoformer_core::datagen::{sample_buildings, simulate};
use thermoformer_core::features::{assemble_windows, fit_standardizer};
use thermoformer_core::{ClimateProfile, ModelConfig, Result, WindowSample};

/// Windows from one simulated hot-humid building under ideal loads.
pub fn sample_windows(config: &ModelConfig, count: usize) -> Result<Vec<WindowSample>> {
    let climate = ClimateProfile::hot_humid(11);
    let building = sample_buildings(1, &climate, 11)?.remove(0);
    let hours = (count + config.context_length + 2).max(72);
    let record = simulate(&building, &climate, 2, hours, 11)?;
    let std = fit_standardizer(&[&record], &[building.statics])?;
    let mut windows = assemble_windows(&record, &building.statics, &std, &config.window())?;
    windows.truncate(count);
    Ok(windows)
}
