//! A toy two-layer stratified lake standing in for an external lake
//! simulator. Layer 1 is the surface, layer 2 the bottom.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Maximum day-to-day change of either layer (°C).
pub const MAX_DAILY_CHANGE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LakeConfig {
    pub surface_mean: f64,
    pub surface_amplitude: f64,
    /// Weight of the smoothed air-temperature anomaly in the surface layer.
    pub air_coupling: f64,
    pub bottom_mean: f64,
    pub bottom_amplitude: f64,
    /// Lag of the bottom seasonal cycle behind the surface (days).
    pub bottom_lag_days: f64,
    /// Day of year stratification begins / ends (inclusive).
    pub stratified_start_doy: u32,
    pub stratified_end_doy: u32,
}

impl Default for LakeConfig {
    fn default() -> Self {
        Self {
            surface_mean: 13.0,
            surface_amplitude: 11.0,
            air_coupling: 0.3,
            bottom_mean: 7.0,
            bottom_amplitude: 2.5,
            bottom_lag_days: 45.0,
            stratified_start_doy: 120,
            stratified_end_doy: 300,
        }
    }
}

/// Day of year at which the seasonal sinusoid crosses its mean going up.
pub const SEASON_PHASE_DOY: f64 = 110.0;

pub fn is_stratified(cfg: &LakeConfig, doy: u32) -> bool {
    doy >= cfg.stratified_start_doy && doy <= cfg.stratified_end_doy
}

/// Simulated surface and bottom temperatures, one value per day.
#[derive(Debug, Clone, PartialEq)]
pub struct LakeProfiles {
    pub surface: Vec<f64>,
    pub bottom: Vec<f64>,
}

impl LakeProfiles {
    pub fn layer_temps(&self, day: usize) -> [f64; 2] {
        [self.surface[day], self.bottom[day]]
    }
}

fn seasonal(mean: f64, amplitude: f64, doy: f64, lag: f64) -> f64 {
    mean + amplitude * (2.0 * PI * (doy - SEASON_PHASE_DOY - lag) / 365.0).sin()
}

fn limit(prev: f64, target: f64) -> f64 {
    prev + (target - prev).clamp(-MAX_DAILY_CHANGE, MAX_DAILY_CHANGE)
}

/// Generates layer temperatures from day-of-year and the air temperature
/// near the reservoir.
///
/// The surface follows a seasonal cycle plus a smoothed air anomaly; the
/// bottom follows a damped, lagged cycle and stays at or below the surface
/// on stratified days. Both layers change by at most
/// [`MAX_DAILY_CHANGE`] per day. `bottom_offset`, when given, shifts the
/// bottom target day by day (e.g. year-to-year stratification strength).
pub fn toy_lake_profiles(cfg: &LakeConfig, doys: &[u32], air: &[f64], bottom_offset: Option<&[f64]>) -> LakeProfiles {
    assert_eq!(doys.len(), air.len(), "one air value per day");
    if let Some(o) = bottom_offset {
        assert_eq!(o.len(), doys.len(), "one offset per day");
    }
    let n = doys.len();
    let mut surface = Vec::with_capacity(n);
    let mut bottom = Vec::with_capacity(n);
    let air_mean = if n == 0 { 0.0 } else { air.iter().sum::<f64>() / n as f64 };
    let mut smooth_anomaly = 0.0;
    for t in 0..n {
        let doy = doys[t] as f64;
        smooth_anomaly = 0.85 * smooth_anomaly + 0.15 * (air[t] - air_mean);
        let s_target = (seasonal(cfg.surface_mean, cfg.surface_amplitude, doy, 0.0) + cfg.air_coupling * smooth_anomaly).max(0.0);
        let s = if t == 0 { s_target } else { limit(surface[t - 1], s_target) };
        surface.push(s);

        let stratified = is_stratified(cfg, doys[t]);
        let mut b_target = seasonal(cfg.bottom_mean, cfg.bottom_amplitude, doy, cfg.bottom_lag_days)
            + bottom_offset.map_or(0.0, |o| o[t]);
        if stratified {
            b_target = b_target.min(s);
        }
        let mut b = if t == 0 { b_target } else { limit(bottom[t - 1], b_target) };
        if stratified {
            b = b.min(s);
        }
        bottom.push(b);
    }
    LakeProfiles { surface, bottom }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doys(n: usize, first: u32) -> Vec<u32> {
        (0..n).map(|t| ((first as usize - 1 + t) % 365 + 1) as u32).collect()
    }

    #[test]
    fn zero_amplitude_gives_constant_profiles() {
        let cfg = LakeConfig {
            surface_amplitude: 0.0,
            bottom_amplitude: 0.0,
            air_coupling: 0.0,
            ..LakeConfig::default()
        };
        let d = doys(400, 1);
        let air: Vec<f64> = d.iter().map(|&x| 10.0 + (x as f64 / 20.0).sin() * 8.0).collect();
        let p = toy_lake_profiles(&cfg, &d, &air, None);
        assert!(p.surface.iter().all(|&v| v == cfg.surface_mean));
        assert!(p.bottom.iter().all(|&v| v == cfg.bottom_mean));
    }

    #[test]
    fn mid_summer_matches_closed_form() {
        // With no air coupling the layers are the closed-form sinusoids:
        // doy 201: surface 13 + 11 sin(2π·91/365) = 13 + 11·0.999991 = 23.99990
        //          bottom   7 + 2.5 sin(2π·46/365) = 7 + 2.5·0.711657 = 8.77914
        let cfg = LakeConfig {
            air_coupling: 0.0,
            ..LakeConfig::default()
        };
        let d = doys(300, 1);
        let p = toy_lake_profiles(&cfg, &d, &vec![0.0; 300], None);
        let t = 200; // doy 201
        assert_eq!(d[t], 201);
        assert!((p.surface[t] - 23.999_90).abs() < 1e-4, "{}", p.surface[t]);
        assert!((p.bottom[t] - 8.779_14).abs() < 1e-4, "{}", p.bottom[t]);
    }
}
