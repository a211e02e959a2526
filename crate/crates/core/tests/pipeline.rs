use sag_core::data::{load_dataset, synth_basin, write_dataset, LoadOptions, SynthConfig, SynthOutput};
use sag_core::model::{Checkpoint, CheckpointModel, ReleaseRoute};
use sag_core::pipeline::{predict_checkpoint, train_variant, RunError, RunSpec, Variant};
use sag_core::train::TrainConfig;

fn small_basin(seed: u64) -> SynthOutput {
    synth_basin(&SynthConfig {
        n_segments: 6,
        n_reservoirs: 2,
        n_days: 90,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn spec(variant: Variant) -> RunSpec {
    RunSpec {
        variant,
        train: TrainConfig {
            epochs: 2,
            forecaster_epochs: 2,
            hidden: 4,
            bptt_window: 30,
            seed: 5,
            ..TrainConfig::default()
        },
        ..RunSpec::default()
    }
}

#[test]
fn pp_variant_never_reads_release_tables() {
    let s = small_basin(1);
    s.dataset.access().reset();
    train_variant(&s.dataset, &s.topology, &spec(Variant::SagPp)).unwrap();
    let used = s.dataset.access().summary();
    assert!(used.drivers && used.observations && used.meta);
    assert!(!used.release);

    s.dataset.access().reset();
    train_variant(&s.dataset, &s.topology, &spec(Variant::SagSim)).unwrap();
    assert!(s.dataset.access().summary().release);
}

#[test]
fn forecaster_targets_exclude_every_downstream_segment() {
    let s = small_basin(2);
    let run = train_variant(&s.dataset, &s.topology, &spec(Variant::SagPp)).unwrap();
    let mask = run.forecaster_mask.expect("PP variant trains a forecaster");
    let excluded = s.topology.reservoir_downstream_union();
    assert!(!excluded.is_empty());
    for &i in &excluded {
        assert!((0..mask.n_steps).all(|t| !mask.is_set(i, t)), "segment {i} is downstream of a reservoir");
    }
    assert!(mask.count() > 0);
    for t in run.test_days.clone() {
        for i in 0..mask.n_segments {
            assert!(!mask.is_set(i, t), "test day {t} leaked into forecaster targets");
        }
    }
}

#[test]
fn se_width_depends_on_variant() {
    let s = small_basin(3);
    let width = |v| match train_variant(&s.dataset, &s.topology, &spec(v)).unwrap().checkpoint.model {
        CheckpointModel::Sag { config, .. } => config.se_inputs,
        CheckpointModel::Lstm { .. } => panic!("expected SAG"),
    };
    let layers = s.dataset.n_layers();
    assert_eq!(width(Variant::SagSim), Some(layers + 1));
    assert_eq!(width(Variant::SagFlow), Some(layers));
    assert_eq!(width(Variant::SagPp), None);
}

#[test]
fn ppx_routes_only_the_listed_reservoirs_to_se() {
    let s = small_basin(4);
    let mut sp = spec(Variant::SagPpx);
    sp.se_reservoirs = Some(vec![1]);
    let run = train_variant(&s.dataset, &s.topology, &sp).unwrap();
    match run.checkpoint.model {
        CheckpointModel::Sag { routes, forecaster, .. } => {
            assert_eq!(routes, vec![ReleaseRoute::Pp, ReleaseRoute::Se]);
            assert!(forecaster.is_some());
        }
        CheckpointModel::Lstm { .. } => panic!("expected SAG"),
    }
}

#[test]
fn sim_without_release_is_rejected() {
    let s = small_basin(5);
    let bare = s.dataset.without_release();
    let err = train_variant(&bare, &s.topology, &spec(Variant::SagSim)).unwrap_err();
    assert!(matches!(err, RunError::MissingReleaseData(0)), "{err:?}");
}

#[test]
fn checkpoint_round_trip_reproduces_predictions_exactly() {
    let s = small_basin(6);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &s.topology, &s.dataset).unwrap();
    let (topology, data) = load_dataset(dir.path(), LoadOptions::default()).unwrap();
    for variant in Variant::ALL {
        let run = train_variant(&data, &topology, &spec(variant)).unwrap();
        let back = Checkpoint::from_json(&run.checkpoint.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), run.checkpoint.to_json().unwrap());
        let pred = predict_checkpoint(&back, &data, &topology).unwrap();
        assert_eq!(pred, run.predictions, "{variant}");
    }
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let s = small_basin(7);
    let a = train_variant(&s.dataset, &s.topology, &spec(Variant::SagPpx)).unwrap();
    let b = train_variant(&s.dataset, &s.topology, &spec(Variant::SagPpx)).unwrap();
    assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
    let mut other = spec(Variant::SagPpx);
    other.train.seed = 6;
    let c = train_variant(&s.dataset, &s.topology, &other).unwrap();
    assert_ne!(a.checkpoint.to_json().unwrap(), c.checkpoint.to_json().unwrap());
}

#[test]
fn history_has_both_stages_for_pp() {
    let s = small_basin(8);
    let run = train_variant(&s.dataset, &s.topology, &spec(Variant::SagPp)).unwrap();
    let stages: Vec<String> = run.history.iter().map(|h| h.stage.to_string()).collect();
    assert_eq!(stages, ["forecaster", "forecaster", "main", "main"]);
    assert!(run.history.iter().all(|h| h.train_loss.is_finite()));
}
