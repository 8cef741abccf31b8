use std::ffi::{CStr, CString};
use std::ptr;

use cmarl_ffi::*;

fn last_error() -> String {
    let p = cmarl_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_string_lossy().into_owned();
    cmarl_string_free(p);
    s
}

#[test]
fn membership_handles_round_trip() {
    let data = [0.2, 0.8, 1.0, 0.0, 0.5, 0.5];
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(cmarl_membership_from_rows(data.as_ptr(), 3, 2, &mut m), CmarlStatus::Ok);
        assert_eq!((cmarl_membership_agents(m), cmarl_membership_communities(m)), (3, 2));
        let mut row = [0.0; 2];
        assert_eq!(cmarl_membership_row(m, 2, row.as_mut_ptr(), 2), CmarlStatus::Ok);
        assert_eq!(row, [0.5, 0.5]);
        assert_eq!(cmarl_membership_row(m, 3, row.as_mut_ptr(), 2), CmarlStatus::InvalidArgument);
        let mut json = ptr::null_mut();
        assert_eq!(cmarl_membership_to_json(m, &mut json), CmarlStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        assert_eq!(v["K"], 2);
        cmarl_membership_free(m);
    }
}

#[test]
fn invalid_rows_and_null_pointers_report_errors() {
    let bad = [0.7, 0.7];
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(cmarl_membership_from_rows(bad.as_ptr(), 1, 2, &mut m), CmarlStatus::InvalidArgument);
        assert!(m.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(cmarl_membership_from_rows(ptr::null(), 1, 2, &mut m), CmarlStatus::NullPointer);
        assert!(last_error().contains("data"));
        cmarl_clear_error();
        assert!(cmarl_last_error_message().is_null());
        cmarl_membership_free(ptr::null_mut());
        cmarl_string_free(ptr::null_mut());
    }
}

#[test]
fn instance_oracle_and_training() {
    let cfg = CString::new(r#"{"kind": "desk-oracle", "steps": 300, "log_stride": 100}"#).unwrap();
    let mut inst = ptr::null_mut();
    unsafe {
        assert_eq!(cmarl_instance_new(cfg.as_ptr(), 4, &mut inst), CmarlStatus::Ok);
        assert_eq!((cmarl_instance_agents(inst), cmarl_instance_states(inst)), (2, 3));
        let mut j = f64::NAN;
        assert_eq!(cmarl_instance_average_return(inst, &mut j), CmarlStatus::Ok);
        assert!((0.0..=4.0).contains(&j));
        let mut csv = ptr::null_mut();
        assert_eq!(cmarl_instance_train_q(inst, &mut csv), CmarlStatus::Ok);
        let first = take_string(csv);
        assert_eq!(first.lines().count(), 5);
        assert_eq!(cmarl_instance_train_q(inst, &mut csv), CmarlStatus::Ok);
        assert_eq!(take_string(csv), first);
        let mut g = ptr::null_mut();
        assert_eq!(cmarl_instance_membership(inst, &mut g), CmarlStatus::Ok);
        assert_eq!(cmarl_membership_communities(g), 2);
        cmarl_membership_free(g);
        cmarl_instance_free(inst);
    }
    let bad = CString::new(r#"{"schema_version": 3}"#).unwrap();
    let mut inst = ptr::null_mut();
    unsafe {
        assert_eq!(cmarl_instance_new(bad.as_ptr(), 0, &mut inst), CmarlStatus::Config);
    }
    assert!(inst.is_null());
}

#[test]
fn run_experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CString::new(r#"{"kind": "figure1-2", "steps": 50, "seeds": [1, 2]}"#).unwrap();
    let task = CString::new("train-v").unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut json = ptr::null_mut();
    unsafe {
        assert_eq!(cmarl_run_experiment(cfg.as_ptr(), task.as_ptr(), out.as_ptr(), &mut json), CmarlStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
        assert_eq!(v["artifacts"].as_array().unwrap().len(), 2);
        assert!(dir.path().join("train-v/seed-2/trace.csv").exists());
        let nope = CString::new("fly").unwrap();
        assert_eq!(cmarl_run_experiment(cfg.as_ptr(), nope.as_ptr(), out.as_ptr(), &mut json), CmarlStatus::InvalidArgument);
    }
}

#[test]
fn estimate_from_dense_adjacency() {
    // Two triangles joined by one edge.
    let n = 6;
    let mut a = vec![0.0; n * n];
    for (i, j) in [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)] {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(cmarl_estimate_membership(a.as_ptr(), n, 2, 0.0, 0, &mut m), CmarlStatus::Ok);
        assert_eq!(cmarl_membership_agents(m), 6);
        cmarl_membership_free(m);
        a[1] = 0.5;
        assert_eq!(cmarl_estimate_membership(a.as_ptr(), n, 2, 0.0, 0, &mut m), CmarlStatus::InvalidArgument);
    }
}

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(cmarl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
