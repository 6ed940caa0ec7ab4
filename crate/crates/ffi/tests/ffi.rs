use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use survbench_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sb_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn grad_hess_toy() {
    let time = [1.0, 2.0, 3.0];
    let event = [1u8, 1, 1];
    let eta = [0.0; 3];
    let mut grad = [0.0; 3];
    let mut hess = [0.0; 3];
    let mut loss = 0.0;
    let s = unsafe {
        sb_cox_grad_hess(time.as_ptr(), event.as_ptr(), eta.as_ptr(), 3, grad.as_mut_ptr(), hess.as_mut_ptr(), &mut loss)
    };
    assert_eq!(s, SbStatus::Ok);
    let want = [2.0 / 3.0, 1.0 / 6.0, -5.0 / 6.0];
    for (g, w) in grad.iter().zip(want) {
        assert!((g - w).abs() < 1e-9);
    }
    assert!((loss - (6f64).ln() / 3.0).abs() < 1e-9);

    let mut pll = 0.0;
    assert_eq!(unsafe { sb_partial_log_likelihood(time.as_ptr(), event.as_ptr(), eta.as_ptr(), 3, &mut pll) }, SbStatus::Ok);
    assert!((pll + (6f64).ln()).abs() < 1e-12);
}

#[test]
fn errors_are_reported() {
    let time = [1.0, -2.0];
    let event = [1u8, 0];
    let eta = [0.0; 2];
    let mut out = 0.0;
    let s = unsafe { sb_partial_log_likelihood(time.as_ptr(), event.as_ptr(), eta.as_ptr(), 2, &mut out) };
    assert_eq!(s, SbStatus::Validation);
    assert!(last_error().contains("time"));

    let s = unsafe { sb_harrell_c(ptr::null(), event.as_ptr(), eta.as_ptr(), 2, &mut out) };
    assert_eq!(s, SbStatus::NullPointer);

    let s = unsafe { sb_model_from_json(c"not json".as_ptr(), &mut ptr::null_mut()) };
    assert_eq!(s, SbStatus::Validation);
    assert!(!last_error().is_empty());
}

#[test]
fn metrics() {
    let time = [1.0, 2.0, 3.0];
    let event = [1u8, 1, 1];
    let risk = [1.0, 3.0, 2.0];
    let mut c = 0.0;
    assert_eq!(unsafe { sb_harrell_c(time.as_ptr(), event.as_ptr(), risk.as_ptr(), 3, &mut c) }, SbStatus::Ok);
    assert!((c - 1.0 / 3.0).abs() < 1e-15);
    let mut u = 0.0;
    let s = unsafe {
        sb_uno_c(time.as_ptr(), event.as_ptr(), 3, time.as_ptr(), event.as_ptr(), risk.as_ptr(), 3, 10.0, &mut u)
    };
    assert_eq!(s, SbStatus::Ok);
    assert_eq!(u, c);
}

#[test]
fn dataset_model_lifecycle() {
    let n = 60;
    let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
    let time: Vec<f64> = x.iter().map(|v| (-(v * 2.0)).exp() + 0.1).collect();
    let event: Vec<u8> = (0..n).map(|i| (i % 3 != 0) as u8).collect();
    let name = CString::new("x").unwrap();
    let names = [name.as_ptr()];
    let mut ds = ptr::null_mut();
    let s = unsafe { sb_dataset_from_arrays(x.as_ptr(), n, 1, names.as_ptr(), time.as_ptr(), event.as_ptr(), &mut ds) };
    assert_eq!(s, SbStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { sb_dataset_n_rows(ds) }, n);
    assert_eq!(unsafe { sb_dataset_n_cols(ds) }, 1);

    let mut model = ptr::null_mut();
    let s = unsafe { sb_model_fit(c"cox_plain".as_ptr(), ptr::null(), ds, 0, &mut model) };
    assert_eq!(s, SbStatus::Ok, "{}", last_error());
    let mut risk = vec![0.0; n];
    assert_eq!(unsafe { sb_model_predict(model, ds, risk.as_mut_ptr(), n) }, SbStatus::Ok);
    assert_eq!(unsafe { sb_model_predict(model, ds, risk.as_mut_ptr(), n - 1) }, SbStatus::InvalidArgument);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { sb_model_to_json(model, &mut json) }, SbStatus::Ok);
    let mut copy = ptr::null_mut();
    assert_eq!(unsafe { sb_model_from_json(json, &mut copy) }, SbStatus::Ok);
    let mut risk2 = vec![0.0; n];
    assert_eq!(unsafe { sb_model_predict(copy, ds, risk2.as_mut_ptr(), n) }, SbStatus::Ok);
    assert_eq!(risk, risk2);

    let mut gbt = ptr::null_mut();
    let params = cr#"{"n_estimators": 5, "num_leaves": 3, "min_leaf": 5}"#;
    assert_eq!(unsafe { sb_model_fit(c"gbt_leaf_wise".as_ptr(), params.as_ptr(), ds, 1, &mut gbt) }, SbStatus::Ok);
    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { sb_model_fit(c"nope".as_ptr(), ptr::null(), ds, 1, &mut bad) }, SbStatus::InvalidArgument);
    assert!(bad.is_null());

    unsafe {
        sb_string_free(json);
        sb_model_free(model);
        sb_model_free(copy);
        sb_model_free(gbt);
        sb_dataset_free(ds);
        sb_dataset_free(ptr::null_mut());
    }
}

#[test]
fn load_csv_handle() {
    let dir = std::env::temp_dir().join(format!("sb_ffi_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("d.csv");
    std::fs::write(&path, "time,event,x\n1,1,0.5\n2,0,0.7\n").unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { sb_dataset_load_csv(cpath.as_ptr(), &mut ds) }, SbStatus::Ok);
    assert_eq!(unsafe { sb_dataset_n_rows(ds) }, 2);
    unsafe { sb_dataset_free(ds) };
    let missing = CString::new(dir.join("absent.csv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sb_dataset_load_csv(missing.as_ptr(), &mut ptr::null_mut()) }, SbStatus::Io);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn header_declares_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/survbench.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "sb_cox_grad_hess",
        "sb_harrell_c",
        "sb_uno_c",
        "sb_model_fit",
        "sb_model_predict",
        "sb_dataset_free",
        "sb_last_error",
        "typedef struct SbDataset SbDataset",
        "SB_STATUS_OK",
    ] {
        assert!(text.contains(f), "header lacks {f}");
    }
    if Command::new("cc").arg("--version").output().is_err() {
        return;
    }
    let dir = std::env::temp_dir().join(format!("sb_hdr_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"survbench.h\"\nint main(void) { SbDataset *d = 0; sb_dataset_free(d); return SB_STATUS_OK; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    std::fs::remove_dir_all(dir).unwrap();
    assert!(status.success());
}
