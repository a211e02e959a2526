//! Desk-scale synthetic basins: random river trees with reservoirs, a
//! latent stream-temperature process with upstream advection, a
//! threshold-triggered cold-release policy and sparse observations.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::graph::{Edge, NetworkTopology, NodeId};

use super::lake::{toy_lake_profiles, LakeConfig};
use super::{BasinDataset, DataError, Observation, ReleaseSeries, TEMP_RANGE, TRUTH_CSV};

/// Number of synthetic driver features.
pub const N_FEATURES: usize = 10;

/// Names of the synthetic driver columns, in order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "precip_mm",
    "air_temp_c",
    "day_of_year",
    "solar_w_m2",
    "shade_frac",
    "pet_mm",
    "elevation_m",
    "length_m",
    "slope",
    "width_m",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_segments: usize,
    pub n_reservoirs: usize,
    pub n_days: usize,
    pub seed: u64,
    pub start_date: NaiveDate,
    /// Independent river trees; reservoirs are dealt to basins round-robin.
    pub n_basins: usize,
    /// Maximum number of upstream tributaries per segment.
    pub branching: usize,
    pub distance_min_m: f64,
    pub distance_max_m: f64,
    pub air_mean_c: f64,
    pub air_amplitude_c: f64,
    pub air_noise_c: f64,
    /// Std of each segment's own AR(1) air-temperature anomaly.
    pub local_air_noise_c: f64,
    /// Fraction of a day's mixed temperature kept (the rest relaxes toward equilibrium).
    pub retention: f64,
    pub local_flow_cfs: f64,
    /// Surface release as a fraction of the upstream inflow.
    pub release_fraction: f64,
    pub release_variability: f64,
    /// Anticipated next-day downstream temperature that triggers a cold
    /// release; `inf` disables bottom releases altogether.
    pub release_threshold_c: f64,
    pub cold_release_cfs: f64,
    /// Probability of a cold release when the anticipated temperature exceeds the threshold.
    pub trigger_probability: f64,
    /// Below-threshold band in which managers release with `event_probability`.
    pub event_margin_c: f64,
    pub event_probability: f64,
    /// Daily probability of a bottom release unrelated to temperature
    /// (e.g. hydropower), in any season.
    pub other_release_probability: f64,
    pub forecast_noise_c: f64,
    pub lake: LakeConfig,
    /// Std of the per-year shift of each reservoir's bottom temperature.
    pub lake_year_offset_c: f64,
    /// Std of the AR(1) gap between true and simulated lake temperatures.
    pub lake_sim_error_c: f64,
    pub observed_fraction: f64,
    pub observation_probability: f64,
    pub observation_noise_c: f64,
    /// Write release flows and simulated profiles for every reservoir.
    pub with_release: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_segments: 20,
            n_reservoirs: 2,
            n_days: 1500,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            n_basins: 1,
            branching: 2,
            distance_min_m: 2_000.0,
            distance_max_m: 20_000.0,
            air_mean_c: 12.0,
            air_amplitude_c: 12.0,
            air_noise_c: 2.5,
            local_air_noise_c: 1.5,
            retention: 0.6,
            local_flow_cfs: 40.0,
            release_fraction: 0.8,
            release_variability: 0.25,
            release_threshold_c: 25.0,
            cold_release_cfs: 250.0,
            trigger_probability: 0.8,
            event_margin_c: 4.0,
            event_probability: 0.25,
            other_release_probability: 0.05,
            forecast_noise_c: 1.0,
            lake: LakeConfig::default(),
            lake_year_offset_c: 2.5,
            lake_sim_error_c: 0.5,
            observed_fraction: 0.7,
            observation_probability: 0.5,
            observation_noise_c: 0.2,
            with_release: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::ConfigInvalid(m));
        if self.n_segments == 0 {
            return bad("n_segments must be at least 1".into());
        }
        if self.n_days < 10 {
            return bad(format!("n_days must be at least 10, got {}", self.n_days));
        }
        if self.n_basins == 0 || self.n_basins > self.n_segments {
            return bad(format!("n_basins must be in 1..={}", self.n_segments));
        }
        if self.branching == 0 {
            return bad("branching must be at least 1".into());
        }
        if !(self.distance_min_m > 0.0 && self.distance_min_m <= self.distance_max_m && self.distance_max_m.is_finite()) {
            return bad("distances must satisfy 0 < distance_min_m <= distance_max_m".into());
        }
        let th = self.release_threshold_c;
        if th.is_nan() || th < TEMP_RANGE.0 || (th > TEMP_RANGE.1 && th != f64::INFINITY) {
            return bad(format!(
                "release_threshold_c must lie in [{}, {}] or be inf",
                TEMP_RANGE.0, TEMP_RANGE.1
            ));
        }
        if !(0.0..1.0).contains(&self.retention) {
            return bad("retention must be in [0, 1)".into());
        }
        for (name, p) in [
            ("trigger_probability", self.trigger_probability),
            ("event_probability", self.event_probability),
            ("other_release_probability", self.other_release_probability),
            ("observed_fraction", self.observed_fraction),
            ("observation_probability", self.observation_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1]"));
            }
        }
        for (name, v) in [
            ("air_noise_c", self.air_noise_c),
            ("local_air_noise_c", self.local_air_noise_c),
            ("local_flow_cfs", self.local_flow_cfs),
            ("release_fraction", self.release_fraction),
            ("release_variability", self.release_variability),
            ("cold_release_cfs", self.cold_release_cfs),
            ("event_margin_c", self.event_margin_c),
            ("forecast_noise_c", self.forecast_noise_c),
            ("lake_year_offset_c", self.lake_year_offset_c),
            ("lake_sim_error_c", self.lake_sim_error_c),
            ("observation_noise_c", self.observation_noise_c),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.local_flow_cfs == 0.0 {
            return bad("local_flow_cfs must be positive".into());
        }
        for b in 0..self.n_basins {
            let edges = basin_range(self.n_segments, self.n_basins, b).len() - 1;
            let res = (0..self.n_reservoirs).filter(|k| k % self.n_basins == b).count();
            if res > edges {
                return bad(format!("basin {b} has {edges} river edges but {res} reservoirs"));
            }
        }
        Ok(())
    }
}

/// Latent process record kept alongside the observable dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub start: NaiveDate,
    pub n_segments: usize,
    pub n_days: usize,
    /// Segment-major `N x T`.
    pub temp_c: Vec<f64>,
    /// Same process with every cold release suppressed.
    pub no_release_temp_c: Vec<f64>,
    /// `(reservoir, day)` of every bottom-layer release.
    pub release_events: Vec<(usize, usize)>,
    /// Nearest downstream segment of each reservoir.
    pub release_targets: Vec<usize>,
    /// Basin of each segment.
    pub segment_basin: Vec<usize>,
}

impl GroundTruth {
    pub fn temp(&self, segment: usize, day: usize) -> f64 {
        self.temp_c[segment * self.n_days + day]
    }

    pub fn no_release_temp(&self, segment: usize, day: usize) -> f64 {
        self.no_release_temp_c[segment * self.n_days + day]
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub topology: NetworkTopology,
    pub dataset: BasinDataset,
    pub truth: GroundTruth,
}

fn basin_range(n: usize, basins: usize, b: usize) -> std::ops::Range<usize> {
    let size = n / basins;
    let extra = n % basins;
    let lo = b * size + b.min(extra);
    let hi = lo + size + usize::from(b < extra);
    lo..hi
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round_to(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

struct River {
    /// Downstream segment of each segment (None for basin outlets).
    downstream: Vec<Option<usize>>,
    distance: Vec<f64>,
    depth: Vec<usize>,
    basin: Vec<usize>,
    /// Segments upstream of each segment, itself included.
    subtree: Vec<usize>,
    /// Reservoir k sits on the river edge `res_up[k] -> res_dn[k]`.
    res_up: Vec<usize>,
    res_dn: Vec<usize>,
    res_split: Vec<f64>,
}

fn build_river(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> River {
    let n = cfg.n_segments;
    let mut downstream = vec![None; n];
    let mut distance = vec![0.0; n];
    let mut depth = vec![0; n];
    let mut basin = vec![0; n];
    let mut children = vec![0usize; n];
    for b in 0..cfg.n_basins {
        let range = basin_range(n, cfg.n_basins, b);
        for j in range.clone() {
            basin[j] = b;
            distance[j] = rng.random_range(cfg.distance_min_m..=cfg.distance_max_m);
            if j == range.start {
                continue;
            }
            let open: Vec<usize> = (range.start..j).filter(|&p| children[p] < cfg.branching).collect();
            let parent = if open.is_empty() {
                j - 1
            } else {
                open[rng.random_range(0..open.len())]
            };
            children[parent] += 1;
            downstream[j] = Some(parent);
            depth[j] = depth[parent] + 1;
        }
    }
    let mut subtree = vec![1usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(depth[j]));
    for &j in &order {
        if let Some(d) = downstream[j] {
            subtree[d] += subtree[j];
        }
    }

    let (mut res_up, mut res_dn, mut res_split) = (vec![], vec![], vec![]);
    let mut taken = vec![false; n];
    for k in 0..cfg.n_reservoirs {
        let b = k % cfg.n_basins;
        let range = basin_range(n, cfg.n_basins, b);
        let free: Vec<usize> = range.filter(|&j| downstream[j].is_some() && !taken[j]).collect();
        let preferred: Vec<usize> = free.iter().copied().filter(|&j| depth[j] >= 2 && subtree[j] >= 2).collect();
        let pool = if preferred.is_empty() { &free } else { &preferred };
        let j = pool[rng.random_range(0..pool.len())];
        taken[j] = true;
        res_up.push(j);
        res_dn.push(downstream[j].expect("filtered"));
        res_split.push(rng.random_range(0.3..0.7));
    }
    River {
        downstream,
        distance,
        depth,
        basin,
        subtree,
        res_up,
        res_dn,
        res_split,
    }
}

fn edges(river: &River) -> Vec<Edge> {
    let mut out = Vec::new();
    for (j, d) in river.downstream.iter().enumerate() {
        let Some(d) = *d else { continue };
        match river.res_up.iter().position(|&u| u == j) {
            Some(k) => {
                let a = river.res_split[k];
                out.push(Edge::new(NodeId::segment(j), NodeId::reservoir(k), river.distance[j] * a));
                out.push(Edge::new(NodeId::reservoir(k), NodeId::segment(d), river.distance[j] * (1.0 - a)));
            }
            None => out.push(Edge::new(NodeId::segment(j), NodeId::segment(d), river.distance[j])),
        }
    }
    out
}

/// Random draws shared by the factual and counterfactual runs.
struct Noise {
    /// Per reservoir and day: surface flow multiplier, cold release size,
    /// discretionary-event uniform, forecast error.
    flow_factor: Vec<Vec<f64>>,
    cold_size: Vec<Vec<f64>>,
    event_u: Vec<Vec<f64>>,
    other_u: Vec<Vec<f64>>,
    forecast: Vec<Vec<f64>>,
}

struct Process<'a> {
    cfg: &'a SynthConfig,
    river: &'a River,
    /// Upstream-first segment order.
    order: Vec<usize>,
    local_flow: Vec<Vec<f64>>,
    discharge: Vec<Vec<f64>>,
    equilibrium: Vec<Vec<f64>>,
    surface_true: Vec<Vec<f64>>,
    bottom_true: Vec<Vec<f64>>,
}

struct Run {
    temp: Vec<Vec<f64>>,
    surface_flow: Vec<Vec<f64>>,
    bottom_flow: Vec<Vec<f64>>,
    events: Vec<(usize, usize)>,
}

impl Process<'_> {
    fn mix(&self, i: usize, t_next: usize, t: usize, temp: &[Vec<f64>], res_flow: &dyn Fn(usize) -> (f64, f64)) -> f64 {
        let q = self.local_flow[i][t_next];
        let mut w = q;
        let mut heat = q * temp[i][t];
        for (j, d) in self.river.downstream.iter().enumerate() {
            if *d == Some(i) && !self.river.res_up.contains(&j) {
                w += self.discharge[j][t];
                heat += self.discharge[j][t] * temp[j][t];
            }
        }
        for (k, &dn) in self.river.res_dn.iter().enumerate() {
            if dn == i {
                let (f, u) = res_flow(k);
                w += f;
                heat += f * u;
            }
        }
        let mixed = heat / w;
        mixed + (1.0 - self.cfg.retention) * (self.equilibrium[i][t_next] - mixed)
    }

    fn released(&self, k: usize, t: usize, surface: f64, bottom: f64) -> (f64, f64) {
        let f = surface + bottom;
        (f, (surface * self.surface_true[k][t] + bottom * self.bottom_true[k][t]) / f)
    }

    fn simulate(&self, noise: &Noise, policy: bool) -> Run {
        let cfg = self.cfg;
        let (n, m, t_len) = (cfg.n_segments, cfg.n_reservoirs, cfg.n_days);
        let mut temp = vec![vec![0.0; t_len]; n];
        let mut surface_flow = vec![vec![0.0; t_len]; m];
        let mut bottom_flow = vec![vec![0.0; t_len]; m];
        let mut events = Vec::new();
        for t in 0..t_len {
            for &i in &self.order {
                temp[i][t] = if t == 0 {
                    self.equilibrium[i][0]
                } else {
                    let flows = |k: usize| self.released(k, t - 1, surface_flow[k][t - 1], bottom_flow[k][t - 1]);
                    self.mix(i, t, t - 1, &temp, &flows)
                };
            }
            for k in 0..m {
                let upstream = self.discharge[self.river.res_up[k]][t];
                let surface = cfg.release_fraction * upstream * noise.flow_factor[k][t] + 1.0;
                surface_flow[k][t] = surface;
                if !policy || t + 1 >= t_len {
                    continue;
                }
                let s = self.river.res_dn[k];
                let surface_only = |r: usize| self.released(r, t, surface_flow[r][t].max(1.0), 0.0);
                let anticipated = self.mix(s, t + 1, t, &temp, &surface_only) + cfg.forecast_noise_c * noise.forecast[k][t];
                let th = cfg.release_threshold_c;
                let u = noise.event_u[k][t];
                let size = if anticipated > th && u < cfg.trigger_probability {
                    0.4 + 1.0 * noise.cold_size[k][t]
                } else if anticipated <= th && anticipated > th - cfg.event_margin_c && u < cfg.event_probability {
                    0.2 + 0.6 * noise.cold_size[k][t]
                } else if th.is_finite() && noise.other_u[k][t] < cfg.other_release_probability {
                    0.2 + 0.8 * noise.cold_size[k][t]
                } else {
                    0.0
                };
                if size > 0.0 {
                    bottom_flow[k][t] = cfg.cold_release_cfs * size;
                    events.push((k, t));
                }
            }
        }
        Run {
            temp,
            surface_flow,
            bottom_flow,
            events,
        }
    }
}

/// Generates a synthetic basin. Identical configs give identical output.
pub fn synth_basin(cfg: &SynthConfig) -> Result<SynthOutput, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, m, t_len) = (cfg.n_segments, cfg.n_reservoirs, cfg.n_days);
    let river = build_river(cfg, &mut rng);
    let topology = NetworkTopology::build(n, m, edges(&river))?;

    let dates: Vec<NaiveDate> = (0..t_len).map(|t| cfg.start_date + chrono::Days::new(t as u64)).collect();
    let doys: Vec<u32> = dates.iter().map(|d| d.ordinal().min(365)).collect();
    let season: Vec<f64> = doys.iter().map(|&d| (2.0 * PI * (d as f64 - 110.0) / 365.0).sin()).collect();

    // static segment attributes
    let shade: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.7)).collect();
    let elevation: Vec<f64> = (0..n)
        .map(|i| round_to(100.0 + 40.0 * river.depth[i] as f64 + rng.random_range(0.0..50.0), 1))
        .collect();
    let length: Vec<f64> = (0..n).map(|i| round_to(river.distance[i], 1)).collect();
    let slope: Vec<f64> = (0..n).map(|_| round_to(rng.random_range(0.001..0.02), 5)).collect();
    let width: Vec<f64> = (0..n).map(|i| round_to(3.0 + 2.0 * (river.subtree[i] as f64).sqrt(), 2)).collect();

    // basin weather
    let mut basin_air = vec![vec![0.0; t_len]; cfg.n_basins];
    let mut basin_wet = vec![vec![0.0; t_len]; cfg.n_basins];
    for b in 0..cfg.n_basins {
        let mut ar = 0.0;
        for t in 0..t_len {
            ar = 0.7 * ar + (1.0f64 - 0.49).sqrt() * cfg.air_noise_c * normal(&mut rng);
            basin_air[b][t] = cfg.air_mean_c + cfg.air_amplitude_c * season[t] + ar;
            let wet: f64 = rng.random();
            basin_wet[b][t] = if wet < 0.3 { -8.0 * (1.0 - rng.random::<f64>()).ln() } else { 0.0 };
        }
    }

    let mut drivers = vec![0.0; t_len * n * N_FEATURES];
    let mut air = vec![vec![0.0; t_len]; n];
    let mut equilibrium = vec![vec![0.0; t_len]; n];
    let mut local_flow = vec![vec![0.0; t_len]; n];
    for i in 0..n {
        let b = river.basin[i];
        let rain_scale = rng.random_range(0.5..1.5);
        let mut smooth = basin_air[b][0];
        let mut local = 0.0;
        for t in 0..t_len {
            local = 0.8 * local + 0.6 * cfg.local_air_noise_c * normal(&mut rng);
            let a = round_to(basin_air[b][t] - 0.0065 * (elevation[i] - 200.0) + local, 2);
            let precip = round_to(basin_wet[b][t] * rain_scale, 2);
            let solar = round_to((220.0 + 100.0 * season[t] - 6.0 * precip + 15.0 * normal(&mut rng)).max(20.0), 1);
            let pet = round_to(0.1 * (a + 5.0).max(0.0) * solar / 220.0, 3);
            air[i][t] = a;
            smooth = 0.7 * smooth + 0.3 * a;
            equilibrium[i][t] = (0.85 * smooth + 2.5 * (1.0 - shade[i]) * solar / 250.0).max(0.5);
            local_flow[i][t] = cfg.local_flow_cfs * (1.0 + 0.05 * precip);
            let row = [
                precip,
                a,
                doys[t] as f64,
                solar,
                round_to(shade[i], 3),
                pet,
                elevation[i],
                length[i],
                slope[i],
                width[i],
            ];
            let base = (t * n + i) * N_FEATURES;
            drivers[base..base + N_FEATURES].copy_from_slice(&row);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| std::cmp::Reverse(river.depth[j]));

    // reservoirs: meta-features, lake profiles and their true counterparts
    let mut meta = Vec::with_capacity(m);
    let mut surface_sim = Vec::with_capacity(m);
    let mut bottom_sim = Vec::with_capacity(m);
    let mut surface_true = Vec::with_capacity(m);
    let mut bottom_true = Vec::with_capacity(m);
    let first_year = dates[0].year();
    let n_years = (dates[t_len - 1].year() - first_year + 2) as usize;
    for k in 0..m {
        let u = river.res_up[k];
        let height: f64 = rng.random_range(20.0..80.0);
        let depth = height * rng.random_range(0.8..1.0);
        meta.push(vec![
            round_to(height, 1),
            round_to(rng.random_range(200.0..1500.0), 1),
            round_to(depth, 1),
            elevation[u],
            round_to(50.0 * river.subtree[u] as f64 * rng.random_range(0.8..1.2), 1),
        ]);
        let lake = LakeConfig {
            bottom_mean: cfg.lake.bottom_mean + (40.0 - depth) / 15.0,
            ..cfg.lake.clone()
        };
        let year_offset: Vec<f64> = (0..n_years).map(|_| cfg.lake_year_offset_c * normal(&mut rng)).collect();
        let offsets: Vec<f64> = (0..t_len)
            .map(|t| {
                let y = (dates[t].year() - first_year) as usize;
                let cur = year_offset[y + 1];
                let prev = year_offset[y];
                let ramp = (doys[t] as f64 / 60.0).min(1.0);
                prev + (cur - prev) * ramp
            })
            .collect();
        let profiles = toy_lake_profiles(&lake, &doys, &air[u], Some(&offsets));
        let mut err = 0.0;
        let mut s_true = Vec::with_capacity(t_len);
        let mut b_true = Vec::with_capacity(t_len);
        for t in 0..t_len {
            err = 0.9 * err + (1.0f64 - 0.81).sqrt() * cfg.lake_sim_error_c * normal(&mut rng);
            s_true.push(profiles.surface[t] + err);
            b_true.push(profiles.bottom[t] + err);
        }
        surface_sim.push(profiles.surface.iter().map(|&v| round_to(v, 3)).collect::<Vec<_>>());
        bottom_sim.push(profiles.bottom.iter().map(|&v| round_to(v, 3)).collect::<Vec<_>>());
        surface_true.push(s_true);
        bottom_true.push(b_true);
    }

    let draw = |rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> f64| -> Vec<Vec<f64>> {
        (0..m).map(|_| (0..t_len).map(|_| f(rng)).collect()).collect()
    };
    let sigma = cfg.release_variability;
    let noise = Noise {
        flow_factor: draw(&mut rng, &|r| (sigma * normal(r) - 0.5 * sigma * sigma).exp()),
        cold_size: draw(&mut rng, &|r| r.random()),
        event_u: draw(&mut rng, &|r| r.random()),
        other_u: draw(&mut rng, &|r| r.random()),
        forecast: draw(&mut rng, &|r| normal(r)),
    };

    // discharge accumulates downstream; reservoirs pass their inflow through
    let mut discharge = vec![vec![0.0; t_len]; n];
    for t in 0..t_len {
        for &j in &order {
            discharge[j][t] += local_flow[j][t];
            if let Some(d) = river.downstream[j] {
                let q = discharge[j][t];
                discharge[d][t] += q;
            }
        }
    }
    let process = Process {
        cfg,
        river: &river,
        order,
        local_flow,
        discharge,
        equilibrium,
        surface_true,
        bottom_true,
    };
    let factual = process.simulate(&noise, true);
    let counterfactual = process.simulate(&noise, false);

    let mut observed: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cfg.observed_fraction).collect();
    for &s in &river.res_dn {
        observed[s] = true;
    }
    let mut observations = Vec::new();
    for i in 0..n {
        for t in 0..t_len {
            let p: f64 = rng.random();
            let e = normal(&mut rng);
            if observed[i] && p < cfg.observation_probability {
                let v = (factual.temp[i][t] + cfg.observation_noise_c * e).clamp(TEMP_RANGE.0, TEMP_RANGE.1);
                observations.push(Observation {
                    segment: i,
                    day: t,
                    temp_c: round_to(v, 2),
                });
            }
        }
    }

    let release = (0..m)
        .map(|k| {
            cfg.with_release.then(|| {
                let mut flows = Vec::with_capacity(2 * t_len);
                let mut temps = Vec::with_capacity(2 * t_len);
                for t in 0..t_len {
                    flows.push(round_to(factual.surface_flow[k][t], 2));
                    flows.push(round_to(factual.bottom_flow[k][t], 2));
                    temps.push(surface_sim[k][t]);
                    temps.push(bottom_sim[k][t]);
                }
                ReleaseSeries {
                    n_layers: 2,
                    flows,
                    temps,
                }
            })
        })
        .collect();

    let dataset = BasinDataset::new(cfg.start_date, t_len, n, N_FEATURES, drivers, observations, meta, release)?;
    let flatten = |v: &[Vec<f64>]| v.iter().flatten().copied().collect::<Vec<f64>>();
    let truth = GroundTruth {
        start: cfg.start_date,
        n_segments: n,
        n_days: t_len,
        temp_c: flatten(&factual.temp),
        no_release_temp_c: flatten(&counterfactual.temp),
        release_events: factual.events,
        release_targets: river.res_dn.clone(),
        segment_basin: river.basin.clone(),
    };
    Ok(SynthOutput {
        topology,
        dataset,
        truth,
    })
}

/// Writes `truth.csv` (`segment_id,date,temp_c,no_release_temp_c`) into `dir`.
pub fn write_truth_csv(dir: &Path, truth: &GroundTruth) -> Result<(), DataError> {
    let path = dir.join(TRUTH_CSV);
    let io = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = File::create(&path).map_err(io)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let schema = |e: csv::Error| DataError::SchemaError {
        file: TRUTH_CSV.into(),
        message: e.to_string(),
    };
    w.write_record(["segment_id", "date", "temp_c", "no_release_temp_c"])
        .map_err(schema)?;
    for i in 0..truth.n_segments {
        for t in 0..truth.n_days {
            let date = truth.start + chrono::Days::new(t as u64);
            w.write_record([
                i.to_string(),
                date.format("%Y-%m-%d").to_string(),
                format!("{:.4}", truth.temp(i, t)),
                format!("{:.4}", truth.no_release_temp(i, t)),
            ])
            .map_err(schema)?;
        }
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_segments: 8,
            n_reservoirs: 1,
            n_days: 400,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn rejects_empty_network_and_short_series() {
        let c = SynthConfig { n_segments: 0, ..small() };
        assert!(matches!(synth_basin(&c), Err(DataError::ConfigInvalid(_))));
        let c = SynthConfig { n_days: 9, ..small() };
        assert!(matches!(synth_basin(&c), Err(DataError::ConfigInvalid(_))));
        let c = SynthConfig {
            release_threshold_c: 80.0,
            ..small()
        };
        assert!(matches!(synth_basin(&c), Err(DataError::ConfigInvalid(_))));
    }

    #[test]
    fn basin_ranges_partition_segments() {
        let r: Vec<_> = (0..3).map(|b| basin_range(10, 3, b)).collect();
        assert_eq!(r, vec![0..4, 4..7, 7..10]);
    }

    #[test]
    fn reservoir_sits_between_segments() {
        let out = synth_basin(&small()).unwrap();
        let topo = &out.topology;
        assert!(!topo.upstream_segments_of_reservoir(0).is_empty());
        assert!(!topo.downstream_segments_of_reservoir(0).is_empty());
        assert_eq!(topo.nearest_downstream_segment(0), Some(out.truth.release_targets[0]));
    }

    #[test]
    fn infinite_threshold_never_releases() {
        let c = SynthConfig {
            release_threshold_c: f64::INFINITY,
            ..small()
        };
        let out = synth_basin(&c).unwrap();
        assert!(out.truth.release_events.is_empty());
        assert_eq!(out.truth.temp_c, out.truth.no_release_temp_c);
    }

    #[test]
    fn summer_triggers_releases() {
        let out = synth_basin(&small()).unwrap();
        assert!(!out.truth.release_events.is_empty());
    }
}
