use std::ffi::{c_char, CStr, CString};
use std::ptr;

use cmoe_ffi::*;

const TINY: &str = include_str!("../../core/tests/fixtures/tiny.toml");

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe { cmoe_last_error(ptr::null_mut(), 0, &mut needed) };
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(unsafe { cmoe_last_error(buf.as_mut_ptr(), buf.len(), &mut needed) }, CmoeStatus::Ok);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn tiny_learner() -> *mut CmoeLearner {
    let cfg = CString::new(TINY).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { cmoe_learner_new(cfg.as_ptr(), &mut h) }, CmoeStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

#[test]
fn full_lifecycle() {
    let h = tiny_learner();
    let (mut n, mut done) = (0usize, 0usize);
    unsafe {
        assert_eq!(cmoe_learner_progress(h, &mut n, &mut done), CmoeStatus::Ok);
        assert_eq!((n, done), (2, 0));
        let mut ratio = 0.0;
        assert_eq!(cmoe_learner_param_ratio(h, &mut ratio), CmoeStatus::NotAvailable);
        assert_eq!(cmoe_learner_step(h), CmoeStatus::Ok);
        let mode = CString::new("oracle").unwrap();
        let mut s = CmoeSummary::default();
        assert_eq!(cmoe_learner_summary(h, mode.as_ptr(), &mut s), CmoeStatus::NotAvailable);
        assert_eq!(cmoe_learner_run(h), CmoeStatus::Ok);
        assert_eq!(cmoe_learner_step(h), CmoeStatus::NotAvailable);
        assert_eq!(cmoe_learner_summary(h, mode.as_ptr(), &mut s), CmoeStatus::Ok);
        assert_eq!(s.bwt, 0.0);
        let mut a = -1.0;
        assert_eq!(cmoe_learner_accuracy(h, mode.as_ptr(), 1, 0, &mut a), CmoeStatus::Ok);
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(cmoe_learner_accuracy(h, mode.as_ptr(), 0, 1, &mut a), CmoeStatus::NotAvailable);
        assert_eq!(cmoe_learner_param_ratio(h, &mut ratio), CmoeStatus::Ok);
        assert!(ratio > 0.0 && ratio <= 1.0);

        let mut needed = 0usize;
        let mut small = [0 as c_char; 4];
        assert_eq!(
            cmoe_learner_metrics_csv(h, small.as_mut_ptr(), small.len(), &mut needed),
            CmoeStatus::BufferTooSmall
        );
        let mut buf = vec![0 as c_char; needed];
        assert_eq!(cmoe_learner_metrics_csv(h, buf.as_mut_ptr(), buf.len(), &mut needed), CmoeStatus::Ok);
        let csv = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned();
        assert!(csv.starts_with("record,routing"));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(cmoe_learner_save(h, path.as_ptr()), CmoeStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cmoe_learner_load(path.as_ptr(), &mut back), CmoeStatus::Ok, "{}", last_error());
        let mut b = CmoeSummary::default();
        assert_eq!(cmoe_learner_summary(back, mode.as_ptr(), &mut b), CmoeStatus::Ok);
        assert_eq!(s, b);
        let mut buf2 = vec![0 as c_char; needed];
        assert_eq!(cmoe_learner_metrics_csv(back, buf2.as_mut_ptr(), buf2.len(), ptr::null_mut()), CmoeStatus::Ok);
        assert_eq!(CStr::from_ptr(buf2.as_ptr()).to_str().unwrap(), csv);
        cmoe_learner_free(back);

        let out = tempfile::tempdir().unwrap();
        let out_path = CString::new(out.path().to_str().unwrap()).unwrap();
        assert_eq!(cmoe_learner_write_outputs(h, out_path.as_ptr()), CmoeStatus::Ok);
        assert!(out.path().join("metrics.csv").is_file());
        cmoe_learner_free(h);
    }
}

#[test]
fn null_arguments_are_rejected() {
    unsafe {
        assert_eq!(cmoe_learner_new(ptr::null(), ptr::null_mut()), CmoeStatus::NullPointer);
        assert_eq!(cmoe_learner_step(ptr::null_mut()), CmoeStatus::NullPointer);
        assert!(last_error().contains("learner"));
        let mut v = 0.0;
        assert_eq!(cmoe_learner_param_ratio(ptr::null(), &mut v), CmoeStatus::NullPointer);
        let h = tiny_learner();
        assert_eq!(cmoe_learner_accuracy(h, ptr::null(), 0, 0, &mut v), CmoeStatus::NullPointer);
        assert_eq!(cmoe_learner_progress(h, ptr::null_mut(), ptr::null_mut()), CmoeStatus::NullPointer);
        cmoe_learner_free(h);
        cmoe_learner_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_codes() {
    unsafe {
        let bad = CString::new("seed = 1\nbogus = 2\n").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(cmoe_learner_new(bad.as_ptr(), &mut h), CmoeStatus::Config);
        assert!(last_error().contains("line 2"));
        assert!(h.is_null());

        let missing = CString::new("/nonexistent/cmoe-checkpoint").unwrap();
        assert_eq!(cmoe_learner_load(missing.as_ptr(), &mut h), CmoeStatus::Io);

        let l = tiny_learner();
        let mode = CString::new("telepathy").unwrap();
        let mut v = 0.0;
        assert_eq!(cmoe_learner_accuracy(l, mode.as_ptr(), 0, 0, &mut v), CmoeStatus::Config);
        let invalid = [0xffu8 as c_char, 0];
        assert_eq!(cmoe_learner_accuracy(l, invalid.as_ptr(), 0, 0, &mut v), CmoeStatus::InvalidUtf8);
        cmoe_learner_free(l);
    }
}

#[test]
fn status_names_are_static_strings() {
    for s in [CmoeStatus::Ok, CmoeStatus::Config, CmoeStatus::Panic] {
        let name = unsafe { CStr::from_ptr(cmoe_status_name(s)) };
        assert!(!name.to_bytes().is_empty());
    }
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/cmoe.h");
    for f in [
        "cmoe_last_error",
        "cmoe_status_name",
        "cmoe_learner_new",
        "cmoe_learner_load",
        "cmoe_learner_free",
        "cmoe_learner_step",
        "cmoe_learner_run",
        "cmoe_learner_progress",
        "cmoe_learner_accuracy",
        "cmoe_learner_summary",
        "cmoe_learner_param_ratio",
        "cmoe_learner_metrics_csv",
        "cmoe_learner_save",
        "cmoe_learner_write_outputs",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f}");
    }
    assert!(header.contains("typedef struct CmoeLearner CmoeLearner;"));
    assert!(header.contains("CMOE_STATUS_OK = 0"));
}
