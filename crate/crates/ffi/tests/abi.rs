use std::ffi::{CStr, CString};
use std::ptr;

use gendilate_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gd_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn tensor(shape: &[usize], data: &[f64]) -> *mut GdTensor {
    let mut t = ptr::null_mut();
    let s = unsafe {
        gd_tensor_new(
            shape.as_ptr(),
            shape.len(),
            data.as_ptr(),
            data.len(),
            &mut t,
        )
    };
    assert_eq!(s, GdStatus::Ok, "{}", last_error());
    t
}

fn values(t: *const GdTensor) -> Vec<f64> {
    unsafe { std::slice::from_raw_parts(gd_tensor_data(t), gd_tensor_len(t)).to_vec() }
}

#[test]
fn tensor_round_trip_and_shape_errors() {
    let t = tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    unsafe {
        assert_eq!(gd_tensor_ndim(t), 2);
        let mut shape = [0usize; 2];
        assert_eq!(gd_tensor_shape(t, shape.as_mut_ptr(), 2), GdStatus::Ok);
        assert_eq!(shape, [2, 3]);
        assert_eq!(
            gd_tensor_shape(t, shape.as_mut_ptr(), 1),
            GdStatus::InvalidArgument
        );
        assert_eq!(values(t), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        gd_tensor_free(t);

        let mut bad = ptr::null_mut();
        let shape = [2usize, 2];
        let data = [1.0];
        assert_ne!(
            gd_tensor_new(shape.as_ptr(), 2, data.as_ptr(), 1, &mut bad),
            GdStatus::Ok
        );
        assert!(bad.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(
            gd_tensor_new(shape.as_ptr(), 2, ptr::null(), 4, &mut bad),
            GdStatus::NullPointer
        );
        assert!(last_error().contains("data"));
        gd_tensor_free(ptr::null_mut());
    }
}

#[test]
fn dilated_conv_example() {
    let x = tensor(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let k = tensor(&[2], &[1.0, 1.0]);
    let mut y = ptr::null_mut();
    unsafe {
        assert_eq!(gd_conv_direct(x, k, 2, false, true, &mut y), GdStatus::Ok);
        assert_eq!(values(y), [4.0, 6.0, 8.0]);
        gd_tensor_free(y);
        assert_eq!(
            gd_conv_direct(x, k, 0, false, true, &mut y),
            GdStatus::InvalidArgument
        );
        gd_tensor_free(x);
        gd_tensor_free(k);
    }
}

#[test]
fn barrier_values_and_range() {
    let mut v = 0.0;
    unsafe {
        assert_eq!(gd_barrier(0.5, 0.0, &mut v), GdStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        assert_eq!(gd_barrier(1.0, -0.1, &mut v), GdStatus::Ok);
        assert!((v - (5.0f64.exp() - 0.1)).abs() < 1e-9);
        assert_eq!(gd_barrier(0.0, 0.5, &mut v), GdStatus::InvalidArgument);
        assert!(last_error().contains("alpha"));
        assert_eq!(gd_barrier(0.0, 0.0, ptr::null_mut()), GdStatus::NullPointer);
    }
}

#[test]
fn masks_soft_binarize_and_score() {
    let rows = tensor(&[5], &[9.0, -9.0, 9.0, -9.0, 9.0]);
    let cols = tensor(&[5], &[9.0, -9.0, 9.0, -9.0, 9.0]);
    let mut m = ptr::null_mut();
    let mut soft = ptr::null_mut();
    let mut bin = ptr::null_mut();
    let mut feasible = false;
    unsafe {
        assert_eq!(gd_mask_separable(rows, cols, 3, 3, &mut m), GdStatus::Ok);
        assert_eq!(gd_mask_soft(m, &mut soft), GdStatus::Ok);
        assert_eq!(gd_tensor_len(soft), 25);
        assert_eq!(
            gd_mask_binarize(m, 0.5, &mut bin, &mut feasible),
            GdStatus::Ok
        );
        assert!(feasible);
        let b = values(bin);
        assert_eq!(b.iter().sum::<f64>(), 9.0);
        assert_eq!(b[0], 1.0);
        assert_eq!(b[1], 0.0);

        let (mut p, mut r) = (0.0, 0.0);
        assert_eq!(gd_recovery_score(bin, bin, &mut p, &mut r), GdStatus::Ok);
        assert_eq!((p, r), (1.0, 1.0));
        assert_eq!(
            gd_recovery_score(bin, rows, &mut p, &mut r),
            GdStatus::ShapeMismatch
        );

        let logits = tensor(&[3, 3], &[5.0; 9]);
        let mut g = ptr::null_mut();
        assert_eq!(gd_mask_general(logits, 2, 2, &mut g), GdStatus::Ok);
        let mut gb = ptr::null_mut();
        assert_eq!(
            gd_mask_binarize(g, 0.5, &mut gb, &mut feasible),
            GdStatus::Ok
        );
        assert!(!feasible);
        assert_eq!(values(gb).iter().sum::<f64>(), 4.0);

        for t in [rows, cols, soft, bin, logits, gb] {
            gd_tensor_free(t);
        }
        gd_mask_free(m);
        gd_mask_free(g);
    }
}

#[test]
fn experiment_through_the_abi() {
    let mut cfg = gendilate::experiment::ExperimentConfig::lag_default(2);
    if let gendilate::experiment::TaskConfig::Lag {
        n_train, n_test, ..
    } = &mut cfg.task
    {
        *n_train = 300;
        *n_test = 100;
    }
    cfg.train.epochs = 3;
    let json = CString::new(cfg.to_json()).unwrap();
    let mut r = ptr::null_mut();
    unsafe {
        assert_eq!(
            gd_experiment_run(json.as_ptr(), &mut r),
            GdStatus::Ok,
            "{}",
            last_error()
        );
        let mut csv = ptr::null_mut();
        assert_eq!(gd_report_metrics_csv(r, &mut csv), GdStatus::Ok);
        let text = CStr::from_ptr(csv).to_str().unwrap().to_owned();
        gd_string_free(csv);
        assert_eq!(text.lines().count(), 4);
        assert_eq!(
            text,
            gendilate::experiment::run(&cfg)
                .unwrap()
                .report
                .metrics_csv()
        );

        let mut summary = ptr::null_mut();
        assert_eq!(gd_report_summary_json(r, &mut summary), GdStatus::Ok);
        let v: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(summary).to_str().unwrap()).unwrap();
        gd_string_free(summary);
        assert_eq!(v["format"], "gendilate-summary/1");

        let (mut acc, mut feasible) = (0.0, false);
        assert_eq!(gd_report_final(r, &mut acc, &mut feasible), GdStatus::Ok);
        assert!((0.0..=1.0).contains(&acc));
        let mut mask = ptr::null_mut();
        assert_eq!(gd_report_mask(r, 0, 0, &mut mask), GdStatus::Ok);
        assert_eq!(gd_tensor_len(mask), 36);
        gd_tensor_free(mask);
        assert_eq!(
            gd_report_mask(r, 1, 0, &mut mask),
            GdStatus::InvalidArgument
        );
        gd_report_free(r);

        let bad = CString::new(r#"{"task": 1}"#).unwrap();
        let mut r2 = ptr::null_mut();
        assert_eq!(gd_experiment_run(bad.as_ptr(), &mut r2), GdStatus::Config);
        assert!(last_error().contains("task"));
        assert_eq!(
            gd_experiment_run(ptr::null(), &mut r2),
            GdStatus::NullPointer
        );
    }
}

#[test]
fn gradient_suite_via_abi() {
    let (mut worst, mut failures) = (1.0, 99usize);
    unsafe {
        assert_eq!(gd_gradcheck_all(&mut worst, &mut failures), GdStatus::Ok);
    }
    assert_eq!(failures, 0);
    assert!(worst < 1e-5);
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(gd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
