use std::ops::Range;

use crate::diff::{Tape, Tensor, Var};
use crate::model::{ModelError, Recurrent, SagConfig, SagModel, SagParams, SequenceInputs};

use super::{adam_step, AdamState, HistoryEntry, ObservationMask, Stage, TrainConfig, TrainError};

/// Records the masked squared-error sum of one window (prediction `j`
/// belongs to step `range.start + j`) and the number of targets; `None` when
/// the window holds no target.
pub fn masked_window_loss(
    tape: &mut Tape,
    predictions: &[Var],
    targets: &ObservationMask,
    range: Range<usize>,
) -> Result<Option<(Var, usize)>, TrainError> {
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (&y, t) in predictions.iter().zip(range) {
        let (target, weight, n) = targets.column(t);
        if n == 0 {
            continue;
        }
        count += n;
        let target = tape.constant(Tensor::column(target));
        let weight = tape.constant(Tensor::column(weight));
        let diff = tape.sub(y, target)?;
        let masked = tape.mul(diff, weight)?;
        let sq = tape.square(masked);
        let s = tape.sum(sq);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| (t, count)))
}

/// Trains `model` with truncated BPTT over `steps`: one Adam update per
/// window, state carried across windows without gradient. Returns the
/// masked MSE of every epoch (from the forward passes of that epoch).
pub fn fit<M: Recurrent>(
    model: &mut M,
    inputs: &SequenceInputs,
    targets: &ObservationMask,
    steps: Range<usize>,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    if targets.count_in(steps.clone()) == 0 {
        return Err(TrainError::EmptyMask);
    }
    let adam = cfg.adam();
    let mut state = AdamState::new(model.store());
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut carry = model.zero_state();
        let mut sse = 0.0;
        let mut n = 0;
        let mut start = steps.start;
        while start < steps.end {
            let end = (start + cfg.bptt_window).min(steps.end);
            let mut tape = Tape::new();
            let out = model.forward_window(&mut tape, inputs, start..end, &carry)?;
            if let Some((total, count)) = masked_window_loss(&mut tape, &out.predictions, targets, start..end)? {
                let value = tape.value(total).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch });
                }
                sse += value;
                n += count;
                let scale = tape.scalar(1.0 / count as f64);
                let loss = tape.mul(total, scale)?;
                let store = model.store_mut();
                tape.backward(loss, store)?;
                adam_step(store, &mut state, &adam)?;
                store.zero_grad();
            }
            carry = out.detach_carry(&tape, &carry);
            start = end;
        }
        let mse = sse / n as f64;
        log::debug!("epoch {epoch}: train mse {mse:.5}");
        history.push(mse);
    }
    Ok(history)
}

fn entries(stage: Stage, losses: &[f64]) -> Vec<HistoryEntry> {
    losses
        .iter()
        .enumerate()
        .map(|(epoch, &train_loss)| HistoryEntry {
            epoch,
            stage,
            train_loss,
        })
        .collect()
}

/// Result of the forecaster stage.
#[derive(Debug, Clone)]
pub struct ForecasterOutput {
    pub model: SagModel,
    /// `N x D_h` hidden representation for every day of the sequence.
    pub anticipated: Vec<Tensor>,
    /// The next-day targets the forecaster was trained on.
    pub mask: ObservationMask,
    pub history: Vec<HistoryEntry>,
}

/// Trains the next-day forecaster on `(x^t, y^{t+1})` pairs inside `train`,
/// never using observations of the `excluded` segments, then applies it to
/// the whole sequence.
pub fn train_forecaster(
    graph: crate::model::GraphTensors,
    inputs: &SequenceInputs,
    observations: &ObservationMask,
    excluded: &[usize],
    train: Range<usize>,
    cfg: &TrainConfig,
) -> Result<ForecasterOutput, TrainError> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(TrainError::TooShort {
            total: train.len(),
            fraction: cfg.train_fraction,
        });
    }
    let mask = observations
        .restrict_steps(train.clone())
        .exclude_segments(excluded)
        .shifted_ahead();
    if mask.count() == 0 {
        return Err(TrainError::EmptyMask);
    }
    let n_features = inputs
        .drivers
        .first()
        .map(Tensor::cols)
        .ok_or_else(|| TrainError::Config("empty input sequence".into()))?;
    let config = SagConfig {
        meta_layers: cfg.meta_layers,
        ..SagConfig::forecaster(cfg.hidden, n_features, graph.meta.cols())
    };
    let mut params = SagParams::init(config, forecaster_seed(cfg.seed))?;
    if cfg.init_output_bias {
        params.set_output_bias(mask.mean().expect("non-empty"));
    }
    let mut model = SagModel::new(params, graph, Vec::new())?;
    let drivers_only = SequenceInputs {
        drivers: inputs.drivers.clone(),
        release: None,
        anticipated: None,
    };
    let losses = fit(
        &mut model,
        &drivers_only,
        &mask,
        train.start..train.end - 1,
        cfg.forecaster_epochs,
        cfg,
    )?;
    let (_, anticipated) = model.predict(&drivers_only, cfg.bptt_window)?;
    Ok(ForecasterOutput {
        model,
        anticipated,
        mask,
        history: entries(Stage::Forecaster, &losses),
    })
}

/// Seed of the forecaster's initialization, distinct from the main model's.
pub(crate) fn forecaster_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Trains the main SAG model end to end on observations inside `train`.
pub fn train_sag(
    mut model: SagModel,
    inputs: &SequenceInputs,
    observations: &ObservationMask,
    train: Range<usize>,
    cfg: &TrainConfig,
) -> Result<(SagModel, Vec<HistoryEntry>), TrainError> {
    if model.uses_se() && inputs.release.is_none() {
        return Err(ModelError::MissingReleaseData.into());
    }
    if model.uses_pp() && inputs.anticipated.is_none() {
        return Err(ModelError::MissingCache.into());
    }
    let mask = observations.restrict_steps(train.clone());
    if cfg.init_output_bias {
        if let Some(mean) = mask.mean() {
            model.params.set_output_bias(mean);
        }
    }
    let losses = fit(&mut model, inputs, &mask, train, cfg.epochs, cfg)?;
    Ok((model, entries(Stage::Main, &losses)))
}
