//! From a dataset and a variant name to a trained checkpoint, and from a
//! checkpoint back to predictions.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{apply_driver_scaling, column_stats, scale, BasinDataset, DataError, FeatureScaling};
use crate::diff::Tensor;
use crate::graph::{AdjacencyMatrix, NetworkTopology, StandardizeScope};
use crate::model::{
    flow_average_or_mean, Checkpoint, CheckpointModel, GraphTensors, LstmModel, ModelError, ModelRole, Recurrent,
    ReleaseRoute, SagConfig, SagModel, SagParams, SequenceInputs, FORMAT_VERSION,
};
use crate::train::{
    chronological_split, fit, train_forecaster, train_sag, HistoryEntry, ObservationMask, Stage, TrainConfig,
    TrainError,
};

/// Model variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Global LSTM over each segment's drivers; ignores the graph.
    #[serde(rename = "rnn")]
    Rnn,
    /// PP embedding for every reservoir.
    #[serde(rename = "sag-pp")]
    SagPp,
    /// SE for a designated subset of reservoirs, PP for the rest.
    #[serde(rename = "sag-ppx")]
    SagPpx,
    /// SE from release flows only (no simulated temperatures).
    #[serde(rename = "sag-flow")]
    SagFlow,
    /// SE from release flows and the flow-average simulated temperature.
    #[serde(rename = "sag-sim")]
    SagSim,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Rnn, Variant::SagPp, Variant::SagPpx, Variant::SagFlow, Variant::SagSim];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnn => "rnn",
            Variant::SagPp => "sag-pp",
            Variant::SagPpx => "sag-ppx",
            Variant::SagFlow => "sag-flow",
            Variant::SagSim => "sag-sim",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = RunError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                RunError::Config(format!(
                    "unknown variant `{s}` (expected one of rnn, sag-pp, sag-ppx, sag-flow, sag-sim)"
                ))
            })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("reservoir {0} has no release/profile data but the variant needs it")]
    MissingReleaseData(usize),
    #[error("dataset does not match: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything that defines one training run besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    /// Reservoirs routed to SE by `sag-ppx`; `None` means every reservoir
    /// that has release data.
    pub se_reservoirs: Option<Vec<usize>>,
    pub adjacency_scope: StandardizeScope,
    pub train: TrainConfig,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            variant: Variant::SagPp,
            se_reservoirs: None,
            adjacency_scope: StandardizeScope::Global,
            train: TrainConfig::default(),
        }
    }
}

/// Release routing of every reservoir for `variant`.
pub fn routes_for(variant: Variant, data: &BasinDataset, se_reservoirs: Option<&[usize]>) -> Result<Vec<ReleaseRoute>, RunError> {
    let m = data.n_reservoirs();
    let all = |route| vec![route; m];
    let routes = match variant {
        Variant::Rnn => Vec::new(),
        Variant::SagPp => all(ReleaseRoute::Pp),
        Variant::SagFlow | Variant::SagSim => all(ReleaseRoute::Se),
        Variant::SagPpx => match se_reservoirs {
            Some(list) => {
                if let Some(&k) = list.iter().find(|&&k| k >= m) {
                    return Err(RunError::Config(format!("se_reservoirs lists reservoir {k}, only {m} exist")));
                }
                (0..m)
                    .map(|k| if list.contains(&k) { ReleaseRoute::Se } else { ReleaseRoute::Pp })
                    .collect()
            }
            None => (0..m)
                .map(|k| if data.has_release(k) { ReleaseRoute::Se } else { ReleaseRoute::Pp })
                .collect(),
        },
    };
    for (k, r) in routes.iter().enumerate() {
        if *r == ReleaseRoute::Se && !data.has_release(k) {
            return Err(RunError::MissingReleaseData(k));
        }
    }
    Ok(routes)
}

/// Number of SE input columns for `variant` (`None` when no SE head).
fn se_columns(variant: Variant, routes: &[ReleaseRoute], n_layers: usize) -> Option<usize> {
    if !routes.contains(&ReleaseRoute::Se) {
        return None;
    }
    Some(match variant {
        Variant::SagFlow => n_layers,
        _ => n_layers + 1,
    })
}

/// Raw SE inputs `[f_1..f_L ; u]` (or flows only) of reservoir `k` on `day`.
fn se_row(data: &BasinDataset, k: usize, day: usize, cols: usize) -> Result<Vec<f64>, RunError> {
    let series = data.release(k).ok_or(RunError::MissingReleaseData(k))?;
    let flows = series.flows_at(day);
    let mut row = flows.to_vec();
    if cols == flows.len() + 1 {
        let (u, flagged) = flow_average_or_mean(flows, series.temps_at(day))?;
        if flagged {
            log::warn!("reservoir {k} releases no water on day {day}; using the unweighted layer mean");
        }
        row.push(u);
    }
    Ok(row)
}

/// Statistics of drivers (training days), meta-features (all reservoirs)
/// and SE inputs (training days of SE-routed reservoirs).
pub fn fit_scaling(
    data: &BasinDataset,
    routes: &[ReleaseRoute],
    se_cols: Option<usize>,
    train: Range<usize>,
) -> Result<FeatureScaling, RunError> {
    let (n, dx) = (data.n_segments, data.n_features);
    let raw = data.drivers_raw();
    let rows = train
        .clone()
        .flat_map(|t| (0..n).map(move |i| (t * n + i) * dx))
        .map(|b| &raw[b..b + dx]);
    let (driver_mean, driver_std) = column_stats(rows, dx);
    let (meta_mean, meta_std) = if data.n_reservoirs() > 0 {
        column_stats(data.meta().iter().map(Vec::as_slice), data.n_meta())
    } else {
        (vec![], vec![])
    };
    let (se_mean, se_std) = match se_cols {
        Some(cols) => {
            let mut rows = Vec::new();
            for (k, r) in routes.iter().enumerate() {
                if *r == ReleaseRoute::Se {
                    for t in train.clone() {
                        rows.push(se_row(data, k, t, cols)?);
                    }
                }
            }
            column_stats(rows.iter().map(Vec::as_slice), cols)
        }
        None => (vec![], vec![]),
    };
    Ok(FeatureScaling {
        driver_mean,
        driver_std,
        meta_mean,
        meta_std,
        se_mean,
        se_std,
    })
}

fn scaled_meta(data: &BasinDataset, scaling: &FeatureScaling) -> Tensor {
    let m = data.n_reservoirs();
    let d = data.n_meta();
    if m == 0 {
        return Tensor::zeros(&[0, d]);
    }
    let meta = data.meta();
    Tensor::from_fn(m, d, |k, j| scale(meta[k][j], scaling.meta_mean[j], scaling.meta_std[j]))
}

/// Scaled per-day model inputs. SE rows of PP-routed reservoirs are zero
/// and their release data is never read.
pub fn build_inputs(
    data: &BasinDataset,
    routes: &[ReleaseRoute],
    se_cols: Option<usize>,
    scaling: &FeatureScaling,
) -> Result<SequenceInputs, RunError> {
    if scaling.driver_mean.len() != data.n_features {
        return Err(RunError::Shape(format!(
            "model expects {} driver features, dataset has {}",
            scaling.driver_mean.len(),
            data.n_features
        )));
    }
    let scaled = apply_driver_scaling(data, scaling);
    let drivers: Vec<Tensor> = (0..data.n_days).map(|t| scaled.drivers_at(t)).collect();
    let release = match se_cols {
        Some(cols) => {
            let m = routes.len();
            let mut days = vec![Tensor::zeros(&[m, cols]); data.n_days];
            for (k, r) in routes.iter().enumerate() {
                if *r != ReleaseRoute::Se {
                    continue;
                }
                for (t, day) in days.iter_mut().enumerate() {
                    let row = se_row(data, k, t, cols)?;
                    for (j, v) in row.into_iter().enumerate() {
                        day.set(k, j, scale(v, scaling.se_mean[j], scaling.se_std[j]));
                    }
                }
            }
            Some(days)
        }
        None => None,
    };
    Ok(SequenceInputs {
        drivers,
        release,
        anticipated: None,
    })
}

fn check_shapes(data: &BasinDataset, topology: &NetworkTopology) -> Result<(), RunError> {
    if data.n_segments != topology.n_segments() || data.n_reservoirs() != topology.n_reservoirs() {
        return Err(RunError::Shape(format!(
            "dataset has {} segments / {} reservoirs, network has {} / {}",
            data.n_segments,
            data.n_reservoirs(),
            topology.n_segments(),
            topology.n_reservoirs()
        )));
    }
    Ok(())
}

fn graph_tensors(
    data: &BasinDataset,
    topology: &NetworkTopology,
    scope: StandardizeScope,
    scaling: &FeatureScaling,
) -> Result<GraphTensors, RunError> {
    let adjacency = AdjacencyMatrix::compute(topology, scope);
    Ok(GraphTensors::new(topology, &adjacency, scaled_meta(data, scaling))?)
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
    /// Next-day targets of the forecaster stage, when one ran.
    pub forecaster_mask: Option<ObservationMask>,
    /// `N x T` predictions of the final model over the whole sequence.
    pub predictions: Vec<Vec<f64>>,
    pub train_days: Range<usize>,
    pub test_days: Range<usize>,
}

/// Trains `spec.variant` on the chronological training split of `data`.
pub fn train_variant(data: &BasinDataset, topology: &NetworkTopology, spec: &RunSpec) -> Result<TrainedRun, RunError> {
    check_shapes(data, topology)?;
    let cfg = &spec.train;
    cfg.validate()?;
    let (train, test) = chronological_split(data.n_days, cfg.train_fraction)?;
    let routes = routes_for(spec.variant, data, spec.se_reservoirs.as_deref())?;
    let se_cols = se_columns(spec.variant, &routes, data.n_layers());
    let scaling = fit_scaling(data, &routes, se_cols, train.clone())?;
    let mut inputs = build_inputs(data, &routes, se_cols, &scaling)?;
    let observations = ObservationMask::from_dataset(data);

    let header = |model| Checkpoint {
        format_version: FORMAT_VERSION,
        variant: spec.variant.name().to_string(),
        seed: cfg.seed,
        n_segments: data.n_segments,
        n_reservoirs: data.n_reservoirs(),
        n_layers: se_cols.map_or(0, |_| data.n_layers()),
        train_fraction: cfg.train_fraction,
        bptt_window: cfg.bptt_window,
        adjacency_scope: spec.adjacency_scope,
        scaling: scaling.clone(),
        model,
    };

    if spec.variant == Variant::Rnn {
        let mut model = LstmModel::init(cfg.hidden, data.n_features, data.n_segments, cfg.seed)?;
        let mask = observations.restrict_steps(train.clone());
        if cfg.init_output_bias {
            if let Some(mean) = mask.mean() {
                model.set_output_bias(mean);
            }
        }
        let losses = fit(&mut model, &inputs, &mask, train.clone(), cfg.epochs, cfg)?;
        let (predictions, _) = model.predict(&inputs, cfg.bptt_window)?;
        let history = losses
            .iter()
            .enumerate()
            .map(|(epoch, &train_loss)| HistoryEntry {
                epoch,
                stage: Stage::Main,
                train_loss,
            })
            .collect();
        return Ok(TrainedRun {
            checkpoint: header(CheckpointModel::Lstm {
                hidden: cfg.hidden,
                n_features: data.n_features,
                params: model.store().clone(),
            }),
            history,
            forecaster_mask: None,
            predictions,
            train_days: train,
            test_days: test,
        });
    }

    let graph = graph_tensors(data, topology, spec.adjacency_scope, &scaling)?;
    let mut history = Vec::new();
    let mut forecaster = None;
    let mut forecaster_mask = None;
    if routes.contains(&ReleaseRoute::Pp) {
        let excluded = topology.reservoir_downstream_union();
        let out = train_forecaster(graph.clone(), &inputs, &observations, &excluded, train.clone(), cfg)?;
        history.extend(out.history);
        inputs.anticipated = Some(out.anticipated);
        forecaster = Some((out.model.params.config.clone(), out.model.params.store.clone()));
        forecaster_mask = Some(out.mask);
    }
    let config = SagConfig {
        hidden: cfg.hidden,
        n_features: data.n_features,
        n_meta: data.n_meta(),
        meta_layers: cfg.meta_layers,
        role: ModelRole::Main,
        pp_head: routes.contains(&ReleaseRoute::Pp),
        se_inputs: se_cols,
    };
    let params = SagParams::init(config.clone(), cfg.seed)?;
    let model = SagModel::new(params, graph, routes.clone())?;
    let (model, main_history) = train_sag(model, &inputs, &observations, train.clone(), cfg)?;
    history.extend(main_history);
    let (predictions, _) = model.predict(&inputs, cfg.bptt_window)?;
    Ok(TrainedRun {
        checkpoint: header(CheckpointModel::Sag {
            config,
            routes,
            params: model.params.store,
            forecaster,
        }),
        history,
        forecaster_mask,
        predictions,
        train_days: train,
        test_days: test,
    })
}

/// Runs a stored model over the whole sequence of `data` (`N x T`).
pub fn predict_checkpoint(ck: &Checkpoint, data: &BasinDataset, topology: &NetworkTopology) -> Result<Vec<Vec<f64>>, RunError> {
    check_shapes(data, topology)?;
    if ck.n_segments != data.n_segments || ck.n_reservoirs != data.n_reservoirs() {
        return Err(RunError::Shape(format!(
            "checkpoint was trained on {} segments / {} reservoirs, dataset has {} / {}",
            ck.n_segments,
            ck.n_reservoirs,
            data.n_segments,
            data.n_reservoirs()
        )));
    }
    let window = ck.bptt_window.max(1);
    match &ck.model {
        CheckpointModel::Lstm {
            hidden,
            n_features,
            params,
        } => {
            if *n_features != data.n_features {
                return Err(RunError::Shape(format!(
                    "model expects {n_features} driver features, dataset has {}",
                    data.n_features
                )));
            }
            let model = LstmModel::from_store(*hidden, *n_features, data.n_segments, params.clone())?;
            let inputs = build_inputs(data, &[], None, &ck.scaling)?;
            Ok(model.predict(&inputs, window)?.0)
        }
        CheckpointModel::Sag {
            config,
            routes,
            params,
            forecaster,
        } => {
            if config.n_features != data.n_features {
                return Err(RunError::Shape(format!(
                    "model expects {} driver features, dataset has {}",
                    config.n_features, data.n_features
                )));
            }
            if config.se_inputs.is_some() && data.n_layers() != ck.n_layers {
                return Err(RunError::Shape(format!(
                    "model expects {} release layers, dataset has {}",
                    ck.n_layers,
                    data.n_layers()
                )));
            }
            for (k, r) in routes.iter().enumerate() {
                if *r == ReleaseRoute::Se && !data.has_release(k) {
                    return Err(RunError::MissingReleaseData(k));
                }
            }
            let graph = graph_tensors(data, topology, ck.adjacency_scope, &ck.scaling)?;
            let mut inputs = build_inputs(data, routes, config.se_inputs, &ck.scaling)?;
            if let Some((fcfg, fstore)) = forecaster {
                let fparams = SagParams::from_store(fcfg.clone(), fstore.clone())?;
                let fmodel = SagModel::new(fparams, graph.clone(), Vec::new())?;
                let drivers_only = SequenceInputs {
                    drivers: inputs.drivers.clone(),
                    ..SequenceInputs::default()
                };
                inputs.anticipated = Some(fmodel.predict(&drivers_only, window)?.1);
            }
            let params = SagParams::from_store(config.clone(), params.clone())?;
            let model = SagModel::new(params, graph, routes.clone())?;
            Ok(model.predict(&inputs, window)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("sag-x".parse::<Variant>().is_err());
    }
}
