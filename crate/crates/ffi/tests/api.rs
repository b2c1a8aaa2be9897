use std::ffi::{CStr, CString};
use std::ptr;

use fedspd::model::LogisticModel;
use fedspd_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fedspd_last_error()) }.to_string_lossy().into_owned()
}

fn checkpoint() -> CString {
    let m = LogisticModel {
        weights: vec![1.0, -2.0, 0.5],
        bias: 0.25,
    };
    CString::new(m.to_checkpoint()).unwrap()
}

#[test]
fn model_round_trip_and_predict() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(fedspd_model_from_checkpoint(checkpoint().as_ptr(), &mut m), FedspdStatus::Ok);
        assert_eq!(fedspd_model_dimension(m), 3);
        let x = [0.5, 0.25, 2.0];
        let mut p = -1.0;
        assert_eq!(fedspd_model_predict_proba(m, x.as_ptr(), 3, &mut p), FedspdStatus::Ok);
        // logit = 0.5 - 0.5 + 1.0 + 0.25
        assert!((p - 1.0 / (1.0 + (-1.25f64).exp())).abs() < 1e-15);

        let mut untouched = -1.0;
        assert_eq!(fedspd_model_predict_proba(m, x.as_ptr(), 2, &mut untouched), FedspdStatus::DimensionMismatch);
        assert_eq!(untouched, -1.0);
        assert!(last_error().contains("dimension"));
        fedspd_model_free(m);
    }
}

#[test]
fn model_load_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, checkpoint().as_bytes()).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(fedspd_model_load(c.as_ptr(), &mut m), FedspdStatus::Ok);
        assert_eq!(fedspd_model_dimension(m), 3);
        fedspd_model_free(m);
        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        assert_eq!(fedspd_model_load(missing.as_ptr(), &mut m), FedspdStatus::Io);
    }
}

#[test]
fn bad_inputs_report_status() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(fedspd_model_from_checkpoint(ptr::null(), &mut m), FedspdStatus::NullPointer);
        assert!(last_error().contains("text"));
        let junk = CString::new("not a checkpoint").unwrap();
        assert_ne!(fedspd_model_from_checkpoint(junk.as_ptr(), &mut m), FedspdStatus::Ok);
        assert!(m.is_null());
        assert_eq!(fedspd_model_dimension(ptr::null()), 0);
        fedspd_model_free(ptr::null_mut());
        fedspd_monitor_free(ptr::null_mut());
    }
}

#[test]
fn monitor_warns_on_fifth_window() {
    let mut mon = ptr::null_mut();
    unsafe {
        assert_eq!(fedspd_monitor_new(50, 10, 5, 0.5, &mut mon), FedspdStatus::Ok);
        let mut st = FedspdStreamState::Negative;
        let mut lat = 99;
        for i in 0..4 {
            assert_eq!(fedspd_monitor_push(mon, 0.99, 50 + i, &mut st, &mut lat), FedspdStatus::Ok);
            assert_eq!((st, lat), (FedspdStreamState::Undecided, 0));
        }
        assert_eq!(fedspd_monitor_push(mon, 0.99, 54, &mut st, ptr::null_mut()), FedspdStatus::Ok);
        assert_eq!(st, FedspdStreamState::Warned);
        assert_eq!(fedspd_monitor_finish(mon, &mut st, &mut lat), FedspdStatus::Ok);
        assert_eq!((st, lat), (FedspdStreamState::Warned, 54));
        fedspd_monitor_free(mon);

        assert_eq!(fedspd_monitor_new(50, 3, 5, 0.5, &mut mon), FedspdStatus::InvalidArgument);
    }
}

#[test]
fn metrics_and_accountant() {
    unsafe {
        let mut p = 0.0;
        assert_eq!(fedspd_derive_p(2, &mut p), FedspdStatus::Ok);
        assert!((p - 3f64.ln()).abs() < 1e-15);
        let mut pen = 0.0;
        assert_eq!(fedspd_penalty(2, p, &mut pen), FedspdStatus::Ok);
        assert!((pen - 0.5).abs() < 1e-12);
        assert_eq!(fedspd_penalty(0, p, &mut pen), FedspdStatus::InvalidArgument);

        let mut s = 0.0;
        assert_eq!(fedspd_speed([1usize, 1].as_ptr(), 2, p, &mut s), FedspdStatus::Ok);
        assert_eq!(s, 1.0);
        assert_eq!(fedspd_speed(ptr::null(), 0, p, &mut s), FedspdStatus::Undefined);
        assert_eq!(fedspd_f_latency(0.5, 0.96, true), 0.48);
        assert_eq!(fedspd_f_latency(0.5, 0.96, false), 0.0);

        let (mut eps, mut order) = (0.0, 0.0);
        assert_eq!(fedspd_dp_epsilon(1.0, 1.0, 1, 1e-5, &mut eps, &mut order), FedspdStatus::Ok);
        // q = 1: min over orders of a/2 + ln(1e5)/(a-1)
        let want = fedspd::dp::default_orders()
            .into_iter()
            .map(|a| a / 2.0 + 1e5f64.ln() / (a - 1.0))
            .fold(f64::INFINITY, f64::min);
        assert!((eps - want).abs() < 1e-12, "{eps} vs {want}");
        assert!(order > 1.0);
        assert_eq!(fedspd_dp_epsilon(0.1, 0.0, 10, 1e-5, &mut eps, ptr::null_mut()), FedspdStatus::InvalidArgument);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(fedspd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
