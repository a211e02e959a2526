use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use sag_core::data::{load_dataset, synth_basin, write_dataset, LoadOptions, SynthConfig};
use sag_core::pipeline::{predict_checkpoint, train_variant, RunSpec, Variant};
use sag_core::train::TrainConfig;
use sag_ffi::*;

fn last_error() -> String {
    let p = sag_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn flow_average_matches_hand_value() {
    let flows = [30.0, 10.0];
    let temps = [20.0, 8.0];
    let mut out = 0.0;
    let s = unsafe { sag_flow_average_temperature(flows.as_ptr(), temps.as_ptr(), 2, &mut out) };
    assert_eq!(s, SagStatus::Ok);
    assert_eq!(out, 17.0);

    let zeros = [0.0, 0.0];
    let s = unsafe { sag_flow_average_temperature(zeros.as_ptr(), temps.as_ptr(), 2, &mut out) };
    assert_eq!(s, SagStatus::InvalidArgument);
    assert!(!last_error().is_empty());
}

#[test]
fn null_arguments_are_reported() {
    let s = unsafe { sag_flow_average_temperature(ptr::null(), ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(s, SagStatus::NullPointer);
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { sag_dataset_load(ptr::null(), true, &mut ds) }, SagStatus::NullPointer);
    unsafe {
        sag_dataset_free(ptr::null_mut());
        sag_model_free(ptr::null_mut());
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cstr(&dir.path().join("nope"));
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { sag_dataset_load(missing.as_ptr(), true, &mut ds) }, SagStatus::Io);
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sag_model_load(missing.as_ptr(), &mut m) }, SagStatus::Io);
    assert!(last_error().contains("nope"));
}

#[test]
fn gradcheck_passes_and_rejects_unknown_size() {
    let mut err = f64::NAN;
    assert_eq!(unsafe { sag_gradcheck(0, &mut err) }, SagStatus::Ok);
    assert!(err < 1e-4, "{err}");
    assert_eq!(unsafe { sag_gradcheck(9, &mut err) }, SagStatus::InvalidArgument);
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_basin(&SynthConfig {
        n_segments: 5,
        n_reservoirs: 1,
        n_days: 40,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    write_dataset(dir.path(), &synth.topology, &synth.dataset).unwrap();
    let spec = RunSpec {
        variant: Variant::SagSim,
        train: TrainConfig {
            epochs: 2,
            forecaster_epochs: 2,
            hidden: 4,
            ..TrainConfig::default()
        },
        ..RunSpec::default()
    };
    let run = train_variant(&synth.dataset, &synth.topology, &spec).unwrap();
    let ck_path = dir.path().join("checkpoint.json");
    run.checkpoint.write(&ck_path).unwrap();
    let (topology, data) = load_dataset(dir.path(), LoadOptions::default()).unwrap();
    let expected = predict_checkpoint(&run.checkpoint, &data, &topology).unwrap();

    let data_dir = cstr(dir.path());
    let ck = cstr(&ck_path);
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(sag_dataset_load(data_dir.as_ptr(), true, &mut ds), SagStatus::Ok);
        let (mut n, mut m, mut t) = (0, 0, 0);
        assert_eq!(sag_dataset_shape(ds, &mut n, &mut m, &mut t), SagStatus::Ok);
        assert_eq!((n, m, t), (5, 1, 40));

        let mut model = ptr::null_mut();
        assert_eq!(sag_model_load(ck.as_ptr(), &mut model), SagStatus::Ok);

        let mut small = vec![0.0; 10];
        assert_eq!(sag_model_predict(model, ds, small.as_mut_ptr(), small.len()), SagStatus::BufferTooSmall);

        let mut out = vec![0.0; n * t];
        assert_eq!(sag_model_predict(model, ds, out.as_mut_ptr(), out.len()), SagStatus::Ok);
        let flat: Vec<f64> = expected.concat();
        assert_eq!(out, flat);

        sag_model_free(model);
        sag_dataset_free(ds);

        // the SE model cannot run without release data
        let mut bare = ptr::null_mut();
        assert_eq!(sag_dataset_load(data_dir.as_ptr(), false, &mut bare), SagStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(sag_model_load(ck.as_ptr(), &mut model), SagStatus::Ok);
        assert_eq!(sag_model_predict(model, bare, out.as_mut_ptr(), out.len()), SagStatus::Data);
        sag_model_free(model);
        sag_dataset_free(bare);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(sag_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sag.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "sag_last_error",
        "sag_version",
        "sag_dataset_load",
        "sag_dataset_free",
        "sag_dataset_shape",
        "sag_model_load",
        "sag_model_free",
        "sag_model_predict",
        "sag_flow_average_temperature",
        "sag_gradcheck",
        "SAG_STATUS_OK = 0",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // syntax check with the system C compiler when one is installed
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"])
        .arg(&header)
        .status()
    else {
        return;
    };
    assert!(status.success(), "header does not compile");
}
