use std::ffi::{c_char, CStr};
use std::ptr;

use dada_ffi::*;

const MOONS: &CStr = c"{\"kind\":\"two_moons\",\"n_per_domain\":40,\"rotation_deg\":30,\"noise_sd\":0.1}";

fn last_error() -> String {
    let p = dada_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn dataset() -> *mut DadaDataset {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dada_dataset_generate(MOONS.as_ptr(), 2, &mut ds) }, DadaStatus::Ok);
    ds
}

#[test]
fn schedules_match_closed_forms() {
    assert_eq!(dada_lr_schedule(0.0, 1e-4, 10.0, 0.75), 1e-4);
    let want = 1e-4 / 11f64.powf(0.75);
    assert!((dada_lr_schedule(1.0, 1e-4, 10.0, 0.75) - want).abs() < 1e-18);
    assert!((dada_lambda_schedule(1.0, 10.0) - (2.0 / (1.0 + (-10f64).exp()) - 1.0)).abs() < 1e-15);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dada_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { dada_dataset_generate(ptr::null(), 0, &mut ds) }, DadaStatus::NullPointer);
    assert!(last_error().contains("spec_json"));
    assert_eq!(unsafe { dada_dataset_generate(MOONS.as_ptr(), 0, ptr::null_mut()) }, DadaStatus::NullPointer);
    let (mut a, mut b) = (0usize, 0usize);
    assert_eq!(unsafe { dada_dataset_sizes(ptr::null(), &mut a, &mut b) }, DadaStatus::NullPointer);
    unsafe {
        dada_dataset_free(ptr::null_mut());
        dada_model_free(ptr::null_mut());
        dada_config_free(ptr::null_mut());
        dada_report_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut ds = ptr::null_mut();
    let bad_utf8 = [0xffu8, 0];
    let s = unsafe { dada_dataset_generate(bad_utf8.as_ptr() as *const c_char, 0, &mut ds) };
    assert_eq!(s, DadaStatus::InvalidUtf8);
    assert_eq!(unsafe { dada_dataset_generate(c"{".as_ptr(), 0, &mut ds) }, DadaStatus::Parse);
    let zero = c"{\"kind\":\"two_moons\",\"n_per_domain\":0,\"rotation_deg\":30,\"noise_sd\":0.1}";
    assert_eq!(unsafe { dada_dataset_generate(zero.as_ptr(), 0, &mut ds) }, DadaStatus::Invalid);
    assert_eq!(unsafe { dada_dataset_load(c"/nonexistent/dir".as_ptr(), &mut ds) }, DadaStatus::Io);
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { dada_config_from_toml(c"typo = 1".as_ptr(), &mut cfg) }, DadaStatus::Invalid);
    assert_eq!(unsafe { dada_config_from_toml(c"eta0 = -1.0".as_ptr(), &mut cfg) }, DadaStatus::Invalid);
    assert!(cfg.is_null());
}

#[test]
fn buffers_truncate_and_report_length() {
    let ds = dataset();
    let mut needed = 0usize;
    assert_eq!(unsafe { dada_dataset_fingerprint(ds, ptr::null_mut(), 0, &mut needed) }, DadaStatus::Ok);
    assert_eq!(needed, 64);
    let mut buf = [0 as c_char; 9];
    assert_eq!(unsafe { dada_dataset_fingerprint(ds, buf.as_mut_ptr(), buf.len(), &mut needed) }, DadaStatus::Ok);
    let short = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(short.len(), 8);
    let mut full = vec![0 as c_char; needed + 1];
    unsafe { dada_dataset_fingerprint(ds, full.as_mut_ptr(), full.len(), &mut needed) };
    let full = unsafe { CStr::from_ptr(full.as_ptr()) }.to_str().unwrap().to_string();
    assert!(full.starts_with(&short));
    unsafe { dada_dataset_free(ds) };
}

#[test]
fn train_predict_save_load_round_trip() {
    let ds = dataset();
    let mut cfg = ptr::null_mut();
    let toml = c"eta0 = 0.05\nhidden = [6]\npretrain_epochs = 2\nn_alter = 1\n";
    assert_eq!(unsafe { dada_config_from_toml(toml.as_ptr(), &mut cfg) }, DadaStatus::Ok);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dada_train(cfg, ds, &mut model) }, DadaStatus::Ok);
    let (mut dim, mut k) = (0usize, 0usize);
    unsafe { dada_model_dims(model, &mut dim, &mut k) };
    assert_eq!((dim, k), (2, 2));

    let x = [0.1, 0.2, -1.0, 0.5, 1.5, -0.3];
    let mut labels = [9usize; 3];
    let mut dom = [0.0; 3];
    let s = unsafe { dada_model_predict(model, x.as_ptr(), 3, 2, labels.as_mut_ptr(), dom.as_mut_ptr()) };
    assert_eq!(s, DadaStatus::Ok);
    assert!(labels.iter().all(|&l| l < 2));
    assert!(dom.iter().all(|&d| d > 0.0 && d < 1.0));
    let s = unsafe { dada_model_predict(model, x.as_ptr(), 2, 3, labels.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, DadaStatus::Invalid);

    let tmp = tempfile::tempdir().unwrap();
    let path = std::ffi::CString::new(tmp.path().join("m.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dada_model_save(model, path.as_ptr()) }, DadaStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { dada_model_load(path.as_ptr(), &mut back) }, DadaStatus::Ok);
    let mut labels2 = [9usize; 3];
    let mut dom2 = [0.0; 3];
    unsafe { dada_model_predict(back, x.as_ptr(), 3, 2, labels2.as_mut_ptr(), dom2.as_mut_ptr()) };
    assert_eq!(labels, labels2);
    assert_eq!(dom, dom2);

    let mut report = ptr::null_mut();
    assert_eq!(unsafe { dada_evaluate(model, ds, &mut report) }, DadaStatus::Ok);
    let mut acc = -1.0;
    assert_eq!(unsafe { dada_report_metric(report, c"acc_target".as_ptr(), &mut acc) }, DadaStatus::Ok);
    assert!((0.0..=1.0).contains(&acc));
    let mut needed = 0usize;
    unsafe { dada_report_jsonl(report, ptr::null_mut(), 0, &mut needed) };
    assert!(needed > 0);

    unsafe {
        dada_report_free(report);
        dada_model_free(back);
        dada_model_free(model);
        dada_config_free(cfg);
        dada_dataset_free(ds);
    }
}

#[test]
fn objective_and_scenario_must_agree() {
    let mut ds = ptr::null_mut();
    let open = c"{\"kind\":\"open_grid\",\"known\":3,\"n_per_class\":10,\"unknown_ratio\":1.0,\"shift\":[0,0],\"spread\":0.3}";
    assert_eq!(unsafe { dada_dataset_generate(open.as_ptr(), 0, &mut ds) }, DadaStatus::Ok);
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { dada_config_from_toml(c"hidden = [4]".as_ptr(), &mut cfg) }, DadaStatus::Ok);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { dada_train(cfg, ds, &mut model) }, DadaStatus::Invalid);
    assert!(model.is_null());
    unsafe {
        dada_config_free(cfg);
        dada_dataset_free(ds);
    }
}
