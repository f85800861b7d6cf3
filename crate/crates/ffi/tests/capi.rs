//! Exercises the C ABI the way a foreign binding would: through raw
//! pointers, status codes, and the last-error buffer.

use libc::{c_char, c_double, c_int};
use std::ffi::CStr;
use std::ptr;
use w2d_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0i8; 256];
    let n = w2d_last_error(buf.as_mut_ptr() as *mut c_char, buf.len());
    assert!(n <= 256);
    unsafe { CStr::from_ptr(buf.as_ptr() as *const c_char) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(w2d_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn dataset_lifecycle_and_introspection() {
    let mut ds: *mut w2d_dataset = ptr::null_mut();
    let status = w2d_dataset_two_shift(7, 0.2, 0.8, 64, &mut ds);
    assert_eq!(status, w2d_status::W2D_OK);
    assert!(!ds.is_null());

    let mut count = 0usize;
    assert_eq!(unsafe { w2d_dataset_env_count(ds, &mut count) }, w2d_status::W2D_OK);
    assert_eq!(count, 2);

    let mut name = vec![0i8; 32];
    let mut len = 0usize;
    let status = unsafe {
        w2d_dataset_env_name(ds, 1, name.as_mut_ptr() as *mut c_char, name.len(), &mut len)
    };
    assert_eq!(status, w2d_status::W2D_OK);
    assert_eq!(len, 4);
    let s = unsafe { CStr::from_ptr(name.as_ptr() as *const c_char) };
    assert_eq!(s.to_str().unwrap(), "test");

    // out-of-range index reports an error with a message
    let status = unsafe { w2d_dataset_env_name(ds, 9, ptr::null_mut(), 0, ptr::null_mut()) };
    assert_eq!(status, w2d_status::W2D_ERR_INVALID_ARGUMENT);
    assert!(last_error().contains("out of range"));

    unsafe { w2d_dataset_free(ds) };
    unsafe { w2d_dataset_free(ptr::null_mut()) }; // null is a no-op
}

#[test]
fn null_arguments_are_rejected_not_crashes() {
    let status = w2d_dataset_two_shift(1, 0.0, 0.0, 16, ptr::null_mut());
    assert_eq!(status, w2d_status::W2D_ERR_NULL_ARGUMENT);

    let mut acc: c_double = 0.0;
    let status = unsafe {
        w2d_evaluate(ptr::null(), ptr::null(), ptr::null(), &mut acc)
    };
    assert_eq!(status, w2d_status::W2D_ERR_NULL_ARGUMENT);
}

#[test]
fn invalid_parameters_surface_as_status_codes() {
    let mut ds: *mut w2d_dataset = ptr::null_mut();
    let status = w2d_dataset_two_shift(7, 1.5, 0.8, 64, &mut ds);
    assert_eq!(status, w2d_status::W2D_ERR_INVALID_ARGUMENT);
    assert!(last_error().contains("diversity"));
}

#[test]
fn train_evaluate_save_load_round_trip() {
    let mut ds: *mut w2d_dataset = ptr::null_mut();
    assert_eq!(
        w2d_dataset_two_shift(3, 0.0, 0.9, 160, &mut ds),
        w2d_status::W2D_OK
    );
    let mut config = w2d_train_config_default();
    config.eta = 32;
    config.epochs = 2;
    config.learning_rate = 0.05;
    config.seed = 1;
    let mut model: *mut w2d_model = ptr::null_mut();
    let mut acc: c_double = -1.0;
    let status = unsafe {
        w2d_train(
            ds,
            w2d_algorithm::W2D_ALG_W2D,
            &config,
            16,
            ptr::null(),
            &mut model,
            &mut acc,
        )
    };
    assert_eq!(status, w2d_status::W2D_OK, "error: {}", last_error());
    assert!((0.0..=100.0).contains(&acc));

    let mut count = 0usize;
    assert_eq!(unsafe { w2d_model_param_count(model, &mut count) }, w2d_status::W2D_OK);
    assert_eq!(count, (2 * 12 * 12) * 16 + 16 + 16 * 2 + 2);

    let mut env_acc: c_double = -1.0;
    let name = c"test";
    assert_eq!(
        unsafe { w2d_evaluate(model, ds, name.as_ptr(), &mut env_acc) },
        w2d_status::W2D_OK
    );
    assert!((0.0..=100.0).contains(&env_acc));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let c_path = std::ffi::CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { w2d_model_save(model, c_path.as_ptr()) }, w2d_status::W2D_OK);
    let mut loaded: *mut w2d_model = ptr::null_mut();
    assert_eq!(unsafe { w2d_model_load(c_path.as_ptr(), &mut loaded) }, w2d_status::W2D_OK);
    let mut acc2: c_double = -1.0;
    assert_eq!(
        unsafe { w2d_evaluate(loaded, ds, name.as_ptr(), &mut acc2) },
        w2d_status::W2D_OK
    );
    // f32 rounding in the checkpoint may move logits, not class decisions
    assert!((acc2 - env_acc).abs() < 2.0);

    unsafe {
        w2d_model_free(model);
        w2d_model_free(loaded);
        w2d_dataset_free(ds);
    }
}

#[test]
fn dataset_save_load_round_trip() {
    let mut ds: *mut w2d_dataset = ptr::null_mut();
    assert_eq!(w2d_dataset_two_shift(9, 0.1, 0.5, 32, &mut ds), w2d_status::W2D_OK);
    let dir = tempfile::tempdir().unwrap();
    let c_dir = std::ffi::CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { w2d_dataset_save(ds, c_dir.as_ptr()) }, w2d_status::W2D_OK);
    let mut back: *mut w2d_dataset = ptr::null_mut();
    assert_eq!(unsafe { w2d_dataset_load(c_dir.as_ptr(), &mut back) }, w2d_status::W2D_OK);
    let mut count = 0usize;
    assert_eq!(unsafe { w2d_dataset_env_count(back, &mut count) }, w2d_status::W2D_OK);
    assert_eq!(count, 2);
    unsafe {
        w2d_dataset_free(ds);
        w2d_dataset_free(back);
    }
}

#[test]
fn ranking_scores_match_reference_rows() {
    // ERM row (29.9±0.9, 72.1±1.6, 87.2±0.6); one +1 row, one -3 row
    let erm_means = [29.9, 72.1, 87.2];
    let erm_stderrs = [0.9, 1.6, 0.6];
    let means = [
        31.0, 71.9, 87.7, // above, within, within -> +1
        24.5, 69.4, 86.0, // below, below, below -> -3
    ];
    let mut scores = [0 as c_int; 2];
    let status = unsafe {
        w2d_ranking_scores(
            means.as_ptr(),
            2,
            3,
            erm_means.as_ptr(),
            erm_stderrs.as_ptr(),
            scores.as_mut_ptr(),
        )
    };
    assert_eq!(status, w2d_status::W2D_OK);
    assert_eq!(scores, [1, -3]);
}

#[test]
fn cmnist_generation_through_ffi() {
    let mut ds: *mut w2d_dataset = ptr::null_mut();
    assert_eq!(w2d_dataset_cmnist(300, 5, 0.25, &mut ds), w2d_status::W2D_OK);
    let mut count = 0usize;
    assert_eq!(unsafe { w2d_dataset_env_count(ds, &mut count) }, w2d_status::W2D_OK);
    assert_eq!(count, 3);
    unsafe { w2d_dataset_free(ds) };
}
