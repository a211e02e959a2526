//! Basin datasets: daily drivers, sparse observations, reservoir metadata
//! and optional per-layer release/profile series.

mod io;
mod lake;
mod scaling;
mod synth;

use std::sync::atomic::{AtomicBool, Ordering};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::graph::GraphError;

pub use io::{load_dataset, write_dataset, LoadOptions, DRIVERS_CSV, EDGES_CSV, META_COLUMNS, OBSERVATIONS_CSV, PROFILES_CSV, RELEASE_CSV, RESERVOIR_META_CSV, TRUTH_CSV};
pub use lake::{is_stratified, toy_lake_profiles, LakeConfig, LakeProfiles, MAX_DAILY_CHANGE};
pub use scaling::{apply_driver_scaling, column_stats, scale, standardize_drivers, FeatureScaling};
pub use synth::{synth_basin, write_truth_csv, GroundTruth, SynthConfig, SynthOutput, FEATURE_NAMES, N_FEATURES};

/// Sanity bound on observed water temperature (°C).
pub const TEMP_RANGE: (f64, f64) = (-5.0, 45.0);

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("schema error in {file}: {message}")]
    SchemaError { file: String, message: String },
    #[error("calendar gap: {0}")]
    CalendarGap(String),
    #[error("observation refers to unknown segment or date: {0}")]
    OrphanObservation(String),
    #[error("release and profile data must be given together: {0}")]
    PartialReleaseData(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("invalid synthetic configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One observed daily mean water temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub segment: usize,
    pub day: usize,
    pub temp_c: f64,
}

/// Per-layer release flows (cfs) and simulated temperatures (°C) for one
/// reservoir, `T x L` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReleaseSeries {
    pub n_layers: usize,
    pub flows: Vec<f64>,
    pub temps: Vec<f64>,
}

impl ReleaseSeries {
    pub fn flows_at(&self, day: usize) -> &[f64] {
        &self.flows[day * self.n_layers..(day + 1) * self.n_layers]
    }

    pub fn temps_at(&self, day: usize) -> &[f64] {
        &self.temps[day * self.n_layers..(day + 1) * self.n_layers]
    }
}

/// Records which tables a consumer actually touched.
#[derive(Debug, Default)]
pub struct AccessLog {
    drivers: AtomicBool,
    observations: AtomicBool,
    meta: AtomicBool,
    release: AtomicBool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessSummary {
    pub drivers: bool,
    pub observations: bool,
    pub meta: bool,
    /// Release flows and simulated profiles (always accessed together).
    pub release: bool,
}

impl AccessLog {
    pub fn summary(&self) -> AccessSummary {
        AccessSummary {
            drivers: self.drivers.load(Ordering::Relaxed),
            observations: self.observations.load(Ordering::Relaxed),
            meta: self.meta.load(Ordering::Relaxed),
            release: self.release.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for f in [&self.drivers, &self.observations, &self.meta, &self.release] {
            f.store(false, Ordering::Relaxed);
        }
    }
}

/// Calendar-aligned daily data for one network.
#[derive(Debug)]
pub struct BasinDataset {
    pub start: NaiveDate,
    pub n_days: usize,
    pub n_segments: usize,
    pub n_features: usize,
    /// Day-major: `drivers[(t * N + i) * D_x + f]`.
    drivers: Vec<f64>,
    observations: Vec<Observation>,
    meta: Vec<Vec<f64>>,
    release: Vec<Option<ReleaseSeries>>,
    access: AccessLog,
}

impl Clone for BasinDataset {
    fn clone(&self) -> Self {
        Self {
            start: self.start,
            n_days: self.n_days,
            n_segments: self.n_segments,
            n_features: self.n_features,
            drivers: self.drivers.clone(),
            observations: self.observations.clone(),
            meta: self.meta.clone(),
            release: self.release.clone(),
            access: AccessLog::default(),
        }
    }
}

impl PartialEq for BasinDataset {
    fn eq(&self, other: &Self) -> bool {
        self.start == other.start
            && self.n_days == other.n_days
            && self.n_segments == other.n_segments
            && self.n_features == other.n_features
            && self.drivers == other.drivers
            && self.observations == other.observations
            && self.meta == other.meta
            && self.release == other.release
    }
}

impl BasinDataset {
    /// Validates and assembles a dataset. Observations are sorted by
    /// `(day, segment)`.
    pub fn new(
        start: NaiveDate,
        n_days: usize,
        n_segments: usize,
        n_features: usize,
        drivers: Vec<f64>,
        mut observations: Vec<Observation>,
        meta: Vec<Vec<f64>>,
        release: Vec<Option<ReleaseSeries>>,
    ) -> Result<Self, DataError> {
        if drivers.len() != n_days * n_segments * n_features {
            return Err(DataError::Invalid(format!(
                "expected {} driver values, got {}",
                n_days * n_segments * n_features,
                drivers.len()
            )));
        }
        if let Some(v) = drivers.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("non-finite driver value {v}")));
        }
        for o in &observations {
            if o.segment >= n_segments || o.day >= n_days {
                return Err(DataError::OrphanObservation(format!("segment {} day {}", o.segment, o.day)));
            }
            if !o.temp_c.is_finite() || o.temp_c < TEMP_RANGE.0 || o.temp_c > TEMP_RANGE.1 {
                return Err(DataError::Invalid(format!(
                    "observed temperature {} outside [{}, {}]",
                    o.temp_c, TEMP_RANGE.0, TEMP_RANGE.1
                )));
            }
        }
        observations.sort_by_key(|o| (o.day, o.segment));
        if observations.windows(2).any(|w| (w[0].day, w[0].segment) == (w[1].day, w[1].segment)) {
            return Err(DataError::Invalid("duplicate observation".into()));
        }
        if release.len() != meta.len() {
            return Err(DataError::Invalid("release entries must match reservoir count".into()));
        }
        let n_meta = meta.first().map(Vec::len).unwrap_or(META_COLUMNS.len());
        if meta.iter().any(|m| m.len() != n_meta || m.iter().any(|v| !v.is_finite())) {
            return Err(DataError::Invalid("reservoir meta-features must be finite and equally sized".into()));
        }
        let mut layers = None;
        for r in release.iter().flatten() {
            if r.flows.len() != n_days * r.n_layers || r.temps.len() != n_days * r.n_layers {
                return Err(DataError::Invalid("release series must cover every day".into()));
            }
            if r.flows.iter().any(|f| !f.is_finite() || *f < 0.0) {
                return Err(DataError::Invalid("release flows must be finite and non-negative".into()));
            }
            if r.temps.iter().any(|m| !m.is_finite()) {
                return Err(DataError::Invalid("simulated temperatures must be finite".into()));
            }
            if *layers.get_or_insert(r.n_layers) != r.n_layers {
                return Err(DataError::Invalid("all reservoirs must report the same layer count".into()));
            }
        }
        Ok(Self {
            start,
            n_days,
            n_segments,
            n_features,
            drivers,
            observations,
            meta,
            release,
            access: AccessLog::default(),
        })
    }

    pub fn n_reservoirs(&self) -> usize {
        self.meta.len()
    }

    pub fn n_meta(&self) -> usize {
        self.meta.first().map(Vec::len).unwrap_or(META_COLUMNS.len())
    }

    /// Number of release depth layers `L` (0 when no reservoir has release data).
    pub fn n_layers(&self) -> usize {
        self.release.iter().flatten().map(|r| r.n_layers).next().unwrap_or(0)
    }

    pub fn date(&self, day: usize) -> NaiveDate {
        self.start + chrono::Days::new(day as u64)
    }

    pub fn access(&self) -> &AccessLog {
        &self.access
    }

    /// Raw driver vector of segment `i` on `day`.
    pub fn driver(&self, day: usize, segment: usize) -> &[f64] {
        self.access.drivers.store(true, Ordering::Relaxed);
        let base = (day * self.n_segments + segment) * self.n_features;
        &self.drivers[base..base + self.n_features]
    }

    pub fn drivers_raw(&self) -> &[f64] {
        self.access.drivers.store(true, Ordering::Relaxed);
        &self.drivers
    }

    /// `N x D_x` driver matrix for one day.
    pub fn drivers_at(&self, day: usize) -> Tensor {
        self.access.drivers.store(true, Ordering::Relaxed);
        let n = self.n_segments * self.n_features;
        Tensor::matrix(
            self.n_segments,
            self.n_features,
            self.drivers[day * n..(day + 1) * n].to_vec(),
        )
        .expect("driver layout")
    }

    pub fn observations(&self) -> &[Observation] {
        self.access.observations.store(true, Ordering::Relaxed);
        &self.observations
    }

    pub fn meta(&self) -> &[Vec<f64>] {
        self.access.meta.store(true, Ordering::Relaxed);
        &self.meta
    }

    /// Whether reservoir `k` has both release flows and simulated profiles,
    /// i.e. is eligible for the SE route. Does not count as reading them.
    pub fn has_release(&self, k: usize) -> bool {
        self.release.get(k).is_some_and(Option::is_some)
    }

    pub fn release(&self, k: usize) -> Option<&ReleaseSeries> {
        self.access.release.store(true, Ordering::Relaxed);
        self.release.get(k).and_then(Option::as_ref)
    }

    /// Copy with the release data of every reservoir removed.
    pub fn without_release(&self) -> Self {
        let mut out = self.clone();
        out.release = vec![None; out.release.len()];
        out
    }

    /// Copy with drivers replaced (same shape), used for standardization.
    pub fn with_drivers(&self, drivers: Vec<f64>) -> Result<Self, DataError> {
        if drivers.len() != self.drivers.len() {
            return Err(DataError::Invalid("driver replacement has the wrong size".into()));
        }
        let mut out = self.clone();
        out.drivers = drivers;
        Ok(out)
    }

    /// Dense `N x T` observation grid and mask.
    pub fn observation_grid(&self) -> (Vec<f64>, Vec<bool>) {
        let (n, t) = (self.n_segments, self.n_days);
        let mut values = vec![0.0; n * t];
        let mut mask = vec![false; n * t];
        for o in self.observations() {
            values[o.segment * t + o.day] = o.temp_c;
            mask[o.segment * t + o.day] = true;
        }
        (values, mask)
    }
}
