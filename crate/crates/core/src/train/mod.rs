//! Masked MSE, Adam, chronological splitting and the two training stages.

mod adam;
mod fit;

use std::fmt;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::BasinDataset;
use crate::diff::DiffError;
use crate::model::ModelError;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fit::{fit, masked_window_loss, train_forecaster, train_sag, ForecasterOutput};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("no observation selected by the loss mask")]
    EmptyMask,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("cannot split {total} days with train fraction {fraction}")]
    TooShort { total: usize, fraction: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        TrainError::Model(ModelError::Diff(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Epochs of the forecaster stage.
    pub forecaster_epochs: usize,
    pub bptt_window: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub hidden: usize,
    pub meta_layers: usize,
    /// Start the output bias at the mean training observation.
    pub init_output_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 50,
            forecaster_epochs: 50,
            bptt_window: 100,
            seed: 0,
            train_fraction: 2.0 / 3.0,
            hidden: 20,
            meta_layers: 1,
            init_output_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must be in (0, 1)");
        }
        if self.bptt_window == 0 {
            return bad("bptt_window must be at least 1");
        }
        if self.hidden == 0 || self.meta_layers == 0 {
            return bad("hidden and meta_layers must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// First `floor(fraction * total)` days train, the rest test.
pub fn chronological_split(total: usize, fraction: f64) -> Result<(Range<usize>, Range<usize>), TrainError> {
    let too_short = || TrainError::TooShort { total, fraction };
    if total < 3 || !(fraction > 0.0 && fraction < 1.0) {
        return Err(too_short());
    }
    let n_train = (fraction * total as f64).floor() as usize;
    if n_train == 0 || n_train >= total {
        return Err(too_short());
    }
    Ok((0..n_train, n_train..total))
}

/// Which `(segment, step)` entries carry a target, and the target values.
/// Segment-major `N x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    pub n_segments: usize,
    pub n_steps: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl ObservationMask {
    pub fn new(n_segments: usize, n_steps: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self, TrainError> {
        if values.len() != n_segments * n_steps || mask.len() != values.len() {
            return Err(TrainError::Config("mask and values must be N x T".into()));
        }
        if values.iter().zip(&mask).any(|(v, &m)| m && !v.is_finite()) {
            return Err(TrainError::Config("masked target is not finite".into()));
        }
        Ok(Self {
            n_segments,
            n_steps,
            values,
            mask,
        })
    }

    pub fn from_dataset(data: &BasinDataset) -> Self {
        let (values, mask) = data.observation_grid();
        Self {
            n_segments: data.n_segments,
            n_steps: data.n_days,
            values,
            mask,
        }
    }

    pub fn get(&self, segment: usize, step: usize) -> Option<f64> {
        let j = segment * self.n_steps + step;
        self.mask[j].then_some(self.values[j])
    }

    pub fn is_set(&self, segment: usize, step: usize) -> bool {
        self.mask[segment * self.n_steps + step]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn count_in(&self, steps: Range<usize>) -> usize {
        (0..self.n_segments)
            .map(|i| steps.clone().filter(|&t| self.is_set(i, t)).count())
            .sum()
    }

    /// Keeps only entries whose step lies in `steps`.
    pub fn restrict_steps(&self, steps: Range<usize>) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_segments {
            for t in 0..self.n_steps {
                if !steps.contains(&t) {
                    out.mask[i * self.n_steps + t] = false;
                }
            }
        }
        out
    }

    /// Drops every entry of the listed segments.
    pub fn exclude_segments(&self, segments: &[usize]) -> Self {
        let mut out = self.clone();
        for &i in segments {
            out.mask[i * self.n_steps..(i + 1) * self.n_steps].fill(false);
        }
        out
    }

    /// Targets one step ahead: entry `(i, t)` holds the observation of day `t + 1`.
    pub fn shifted_ahead(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_segments {
            let row = i * self.n_steps;
            for t in 0..self.n_steps {
                let (v, m) = if t + 1 < self.n_steps {
                    (self.values[row + t + 1], self.mask[row + t + 1])
                } else {
                    (0.0, false)
                };
                out.values[row + t] = v;
                out.mask[row + t] = m;
            }
        }
        out
    }

    /// Segments with at least one masked entry.
    pub fn segments_present(&self) -> Vec<usize> {
        (0..self.n_segments)
            .filter(|&i| self.mask[i * self.n_steps..(i + 1) * self.n_steps].iter().any(|&m| m))
            .collect()
    }

    /// Mean of the masked targets, `None` when nothing is masked.
    pub fn mean(&self) -> Option<f64> {
        let n = self.count();
        (n > 0).then(|| {
            self.values
                .iter()
                .zip(&self.mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum::<f64>()
                / n as f64
        })
    }

    /// `N x 1` targets and 0/1 weights of one step.
    pub(crate) fn column(&self, step: usize) -> (Vec<f64>, Vec<f64>, usize) {
        let mut target = vec![0.0; self.n_segments];
        let mut weight = vec![0.0; self.n_segments];
        let mut n = 0;
        for i in 0..self.n_segments {
            let j = i * self.n_steps + step;
            if self.mask[j] {
                target[i] = self.values[j];
                weight[i] = 1.0;
                n += 1;
            }
        }
        (target, weight, n)
    }
}

/// Mean of `(pred - obs)^2` over masked entries.
pub fn masked_mse(pred: &[f64], obs: &[f64], mask: &[bool]) -> Result<f64, TrainError> {
    if pred.len() != obs.len() || obs.len() != mask.len() {
        return Err(TrainError::Config("prediction, observation and mask lengths differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, o), &m) in pred.iter().zip(obs).zip(mask) {
        if m {
            sum += (p - o) * (p - o);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyMask);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Forecaster,
    Main,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Forecaster => "forecaster",
            Stage::Main => "main",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
}

/// Writes `epoch,stage,train_loss` rows.
pub fn write_history_csv<W: Write>(history: &[HistoryEntry], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "stage", "train_loss"])?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.stage.to_string(), format!("{}", h.train_loss)])?;
    }
    w.flush()?;
    Ok(())
}
