//! The canonical gradient-check episode: five segments, one reservoir, ten
//! steps, checked once with the reservoir on the SE route and once on PP.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{grad_check_with, DiffError, GradCheckReport, Tape, Tensor};
use crate::graph::{AdjacencyMatrix, Edge, NetworkTopology, NodeId, StandardizeScope};
use crate::model::{GraphTensors, ModelError, ModelRole, Recurrent, ReleaseRoute, SagConfig, SagModel, SagParams, SequenceInputs};
use crate::train::{masked_window_loss, ObservationMask};

pub const EPISODE_STEPS: usize = 10;
pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeSize {
    Tiny,
    Small,
}

impl EpisodeSize {
    /// `(hidden, drivers, meta, flows)`
    fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            EpisodeSize::Tiny => (3, 2, 2, 2),
            EpisodeSize::Small => (6, 5, 3, 2),
        }
    }
}

impl FromStr for EpisodeSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(EpisodeSize::Tiny),
            "small" => Ok(EpisodeSize::Small),
            other => Err(format!("unknown size `{other}` (expected tiny or small)")),
        }
    }
}

/// s0 -> s1 -> r0 -> s2 -> s3 <- s4
pub fn episode_topology() -> NetworkTopology {
    let s = NodeId::segment;
    let r = NodeId::reservoir;
    NetworkTopology::build(
        5,
        1,
        vec![
            Edge::new(s(0), s(1), 1200.0),
            Edge::new(s(1), r(0), 900.0),
            Edge::new(r(0), s(2), 700.0),
            Edge::new(s(2), s(3), 2500.0),
            Edge::new(s(4), s(3), 1600.0),
        ],
    )
    .expect("canonical topology is valid")
}

struct Episode {
    model: SagModel,
    inputs: SequenceInputs,
    targets: ObservationMask,
}

fn build_episode(size: EpisodeSize, route: ReleaseRoute, seed: u64) -> Result<Episode, ModelError> {
    let (d, dx, dm, flows) = size.dims();
    let topology = episode_topology();
    let adjacency = AdjacencyMatrix::compute(&topology, StandardizeScope::Global);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, lo: f64, hi: f64| Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi));

    let meta = uniform(1, dm, -1.0, 1.0);
    let graph = GraphTensors::new(&topology, &adjacency, meta)?;
    let se_cols = flows + 1;
    let config = SagConfig {
        hidden: d,
        n_features: dx,
        n_meta: dm,
        meta_layers: 1,
        role: ModelRole::Main,
        pp_head: route == ReleaseRoute::Pp,
        se_inputs: (route == ReleaseRoute::Se).then_some(se_cols),
    };
    let params = SagParams::init(config, seed.wrapping_add(1))?;
    let model = SagModel::new(params, graph, vec![route])?;

    let drivers = (0..EPISODE_STEPS).map(|_| uniform(5, dx, -1.0, 1.0)).collect();
    let (release, anticipated) = match route {
        ReleaseRoute::Se => (Some((0..EPISODE_STEPS).map(|_| uniform(1, se_cols, -1.0, 1.0)).collect()), None),
        ReleaseRoute::Pp => (None, Some((0..EPISODE_STEPS).map(|_| uniform(5, d, -1.0, 1.0)).collect())),
    };
    let inputs = SequenceInputs {
        drivers,
        release,
        anticipated,
    };

    let n = 5 * EPISODE_STEPS;
    let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    let targets = ObservationMask::new(5, EPISODE_STEPS, values, mask).expect("finite targets");
    Ok(Episode { model, inputs, targets })
}

/// Masked MSE of the whole episode recorded on `tape`.
fn episode_loss(tape: &mut Tape, model: &SagModel, ep: &Episode) -> Result<crate::diff::Var, ModelError> {
    let out = model.forward_window(tape, &ep.inputs, 0..EPISODE_STEPS, &model.zero_state())?;
    let (total, count) = masked_window_loss(tape, &out.predictions, &ep.targets, 0..EPISODE_STEPS)
        .map_err(|e| ModelError::Config(e.to_string()))?
        .expect("episode mask is non-empty");
    let scale = tape.scalar(1.0 / count as f64);
    Ok(tape.mul(total, scale)?)
}

fn to_diff(e: ModelError) -> DiffError {
    match e {
        ModelError::Diff(d) => d,
        other => DiffError::NonFiniteValue(other.to_string()),
    }
}

fn check_route(size: EpisodeSize, route: ReleaseRoute, corrupt: bool) -> Result<GradCheckReport, ModelError> {
    let ep = build_episode(size, route, 7)?;
    let ids = ep.model.params.active_ids();
    let mut store = ep.model.params.store.clone();
    let with_store = |s: &crate::diff::ParamStore| {
        let mut m = ep.model.clone();
        m.params.store = s.clone();
        m
    };
    let report = grad_check_with(
        &mut store,
        &ids,
        GRADCHECK_EPS,
        |s| {
            let m = with_store(s);
            let mut tape = Tape::new();
            tape.corrupt_tanh_backward(corrupt);
            let loss = episode_loss(&mut tape, &m, &ep).map_err(to_diff)?;
            tape.backward_strict(loss, s)
        },
        |s| {
            let m = with_store(s);
            let mut tape = Tape::new();
            let loss = episode_loss(&mut tape, &m, &ep).map_err(to_diff)?;
            Ok(tape.value(loss).item())
        },
    )?;
    Ok(report)
}

/// Gradient check of every parameter over both release routes; the report
/// carries the larger of the two maximum relative errors.
pub fn run_gradcheck(size: EpisodeSize) -> Result<GradCheckReport, ModelError> {
    run_gradcheck_inner(size, false)
}

/// Same check with a deliberately wrong tanh derivative; used to show the
/// check catches a broken backward pass.
#[doc(hidden)]
pub fn run_gradcheck_corrupted(size: EpisodeSize) -> Result<GradCheckReport, ModelError> {
    run_gradcheck_inner(size, true)
}

fn run_gradcheck_inner(size: EpisodeSize, corrupt: bool) -> Result<GradCheckReport, ModelError> {
    let se = check_route(size, ReleaseRoute::Se, corrupt)?;
    let pp = check_route(size, ReleaseRoute::Pp, corrupt)?;
    let entries = se.entries_checked + pp.entries_checked;
    let mut worst = if se.max_relative_error >= pp.max_relative_error { se } else { pp };
    worst.entries_checked = entries;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!("tiny".parse::<EpisodeSize>().unwrap(), EpisodeSize::Tiny);
        assert!("huge".parse::<EpisodeSize>().is_err());
    }

    #[test]
    fn tiny_episode_passes_and_corruption_is_caught() {
        let ok = run_gradcheck(EpisodeSize::Tiny).unwrap();
        assert!(ok.max_relative_error < GRADCHECK_TOLERANCE, "{ok:?}");
        let bad = run_gradcheck_corrupted(EpisodeSize::Tiny).unwrap();
        assert!(bad.max_relative_error > GRADCHECK_TOLERANCE, "{bad:?}");
    }
}
