//! The state-aware graph (SAG) recurrent cell, its release embeddings and
//! the plain LSTM baseline.
//!
//! Node states are stored as rows: a `N x D_h` tensor holds one stream state
//! per segment and a `M x D_h` tensor one reservoir state per reservoir. All
//! equations are evaluated for every node at once, reading only values from
//! the previous step, so updates are synchronous by construction.

mod cell;
mod checkpoint;
mod lstm;
mod params;
mod release;

use std::ops::Range;

pub use cell::{Bound, Gates, GraphTensors, ReleaseRoute, RouteTrace, SagModel, StepVars};
pub use checkpoint::{Checkpoint, CheckpointModel, FORMAT_VERSION};
pub use lstm::LstmModel;
pub use params::{glorot_bound, MetaFilterIds, ModelRole, SagConfig, SagParamIds, SagParams};
pub use release::{flow_average_or_mean, flow_average_temperature};

use crate::diff::{DiffError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("release data missing for an SE-routed reservoir")]
    MissingReleaseData,
    #[error("forecaster output missing for a PP-routed reservoir")]
    MissingCache,
    #[error("reservoir {0} has no downstream segments")]
    EmptyDownstreamSet(usize),
    #[error("total release flow is zero")]
    ZeroTotalFlow,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Per-step inputs for a whole sequence, indexed by day.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceInputs {
    /// `N x D_x` drivers per day (already standardized).
    pub drivers: Vec<Tensor>,
    /// `M x (L or L+1)` SE inputs per day; rows of PP-routed reservoirs are zero.
    pub release: Option<Vec<Tensor>>,
    /// `N x D_h` forecaster hidden representations per day.
    pub anticipated: Option<Vec<Tensor>>,
}

impl SequenceInputs {
    pub fn len(&self) -> usize {
        self.drivers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drivers.is_empty()
    }

    fn check(&self, n_segments: usize, n_features: usize, range: Range<usize>) -> Result<(), ModelError> {
        if range.end > self.drivers.len() {
            return Err(ModelError::Shape(format!(
                "window ends at {} but only {} days are available",
                range.end,
                self.drivers.len()
            )));
        }
        if let Some(x) = self.drivers.first() {
            if x.rows() != n_segments || x.cols() != n_features {
                return Err(ModelError::Shape(format!(
                    "drivers are {}x{}, model expects {n_segments}x{n_features}",
                    x.rows(),
                    x.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Recurrent state values carried between windows (no gradient history).
#[derive(Debug, Clone, PartialEq)]
pub struct CarryState {
    pub tensors: Vec<Tensor>,
}

/// Output of one recorded window.
#[derive(Debug, Clone)]
pub struct WindowOutput {
    /// `N x 1` prediction per step.
    pub predictions: Vec<Var>,
    /// `N x D_h` hidden representation per step.
    pub hidden: Vec<Var>,
    /// Final state handles; empty for an empty window.
    pub carry: Vec<Var>,
    pub trace: RouteTrace,
}

impl WindowOutput {
    /// Detaches the final state so the next window starts without gradient
    /// flowing back into this one.
    pub fn detach_carry(&self, tape: &Tape, fallback: &CarryState) -> CarryState {
        if self.carry.is_empty() {
            return fallback.clone();
        }
        CarryState {
            tensors: self.carry.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// A sequence model trainable with truncated backpropagation through time.
pub trait Recurrent {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn zero_state(&self) -> CarryState;
    fn forward_window(
        &self,
        tape: &mut Tape,
        inputs: &SequenceInputs,
        range: Range<usize>,
        init: &CarryState,
    ) -> Result<WindowOutput, ModelError>;

    /// Runs the whole sequence window by window and returns per-day
    /// predictions (`N x T`, row-major by segment) and hidden values.
    fn predict(&self, inputs: &SequenceInputs, window: usize) -> Result<(Vec<Vec<f64>>, Vec<Tensor>), ModelError> {
        let total = inputs.len();
        let window = window.max(1);
        let mut state = self.zero_state();
        let mut preds: Vec<Vec<f64>> = Vec::new();
        let mut hidden = Vec::with_capacity(total);
        let mut start = 0;
        while start < total {
            let end = (start + window).min(total);
            let mut tape = Tape::new();
            let out = self.forward_window(&mut tape, inputs, start..end, &state)?;
            for (&y, &h) in out.predictions.iter().zip(&out.hidden) {
                let yv = tape.value(y);
                if preds.is_empty() {
                    preds = vec![Vec::with_capacity(total); yv.rows()];
                }
                for (i, row) in preds.iter_mut().enumerate() {
                    row.push(yv.get(i, 0));
                }
                hidden.push(tape.value(h).clone());
            }
            state = out.detach_carry(&tape, &state);
            start = end;
        }
        Ok((preds, hidden))
    }
}
