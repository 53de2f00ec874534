use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use recurstrat_ffi::*;

fn last_error() -> String {
    let p = rs_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn simulate_fit_and_query() {
    unsafe {
        let mut data = ptr::null_mut();
        let mut census = ptr::null_mut();
        assert_eq!(rs_simulate(1, 30_000, 3, &mut data, &mut census), RsStatus::Ok);
        assert!(rs_dataset_len(data) > 1000);
        let model = CString::new("nnc").unwrap();
        let mut fit = ptr::null_mut();
        assert_eq!(rs_fit_census(data, census, model.as_ptr(), &mut fit), RsStatus::Ok);
        assert_eq!(rs_fit_converged(fit), 1);
        let mut beta = [0.0; 3];
        let mut n = 0;
        assert_eq!(rs_fit_beta(fit, 0, beta.as_mut_ptr(), 3, &mut n), RsStatus::Ok);
        assert_eq!(n, 3);
        assert!(beta.iter().all(|b| b.is_finite() && *b < 0.0), "{beta:?}");
        assert_eq!(rs_fit_beta(fit, 0, beta.as_mut_ptr(), 2, &mut n), RsStatus::InvalidArgument);
        assert_eq!(rs_fit_beta(fit, 1, beta.as_mut_ptr(), 3, &mut n), RsStatus::InvalidArgument);
        let mut c = 0.0;
        assert_eq!(rs_fit_baseline_cumulative(fit, 0, 10.0, &mut c), RsStatus::Ok);
        assert!(c > 0.0);
        let mut json = ptr::null_mut();
        assert_eq!(rs_fit_to_json(fit, &mut json), RsStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        assert!(text.contains("\"approach\": \"census\""));
        rs_string_free(json);

        let mut zt = ptr::null_mut();
        let status = rs_fit_zt(data, model.as_ptr(), &mut zt);
        assert!(matches!(status, RsStatus::Ok | RsStatus::NotConverged));
        assert!(!zt.is_null());
        rs_fit_free(zt);
        rs_fit_free(fit);
        rs_dataset_free(data);
        rs_census_free(census);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut data = ptr::null_mut();
        let mut census = ptr::null_mut();
        assert_eq!(rs_simulate(9, 1000, 0, &mut data, &mut census), RsStatus::InvalidArgument);
        assert!(last_error().contains("scenario"));
        assert_eq!(rs_simulate(1, 1000, 0, ptr::null_mut(), &mut census), RsStatus::NullPointer);
        let missing = CString::new("/nonexistent/subjects.csv").unwrap();
        assert_eq!(rs_dataset_load(missing.as_ptr(), missing.as_ptr(), 18.0, &mut data), RsStatus::Io);
        assert_eq!(rs_census_load(ptr::null(), 18.0, &mut census), RsStatus::NullPointer);
        let bad = CString::new("xyz").unwrap();
        let mut fit = ptr::null_mut();
        assert_eq!(rs_fit_zt(ptr::null(), bad.as_ptr(), &mut fit), RsStatus::NullPointer);
        assert_eq!(rs_fit_converged(ptr::null()), 0);
        assert_eq!(rs_dataset_len(ptr::null()), 0);
        rs_fit_free(ptr::null_mut());
        rs_string_free(ptr::null_mut());
        assert_eq!(rs_simulate(1, 5000, 0, &mut data, &mut census), RsStatus::Ok);
        assert!(rs_last_error().is_null());
        assert_eq!(rs_fit_census(data, census, bad.as_ptr(), &mut fit), RsStatus::InvalidArgument);
        assert!(fit.is_null());
        rs_dataset_free(data);
        rs_census_free(census);
    }
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include");
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("librecurstrat_ffi.a");
    assert!(lib.exists(), "{}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "recurstrat.h"
int main(void) {
    RsDataset *d = NULL; RsCensus *c = NULL; RsFit *f = NULL;
    if (rs_simulate(2, 20000, 1, &d, &c) != RS_STATUS_OK) return 1;
    RsStatus s = rs_fit_census(d, c, "snc", &f);
    if (s != RS_STATUS_OK && s != RS_STATUS_NOT_CONVERGED) return 2;
    double beta[3]; uintptr_t n = 0;
    if (rs_fit_beta(f, 0, beta, 3, &n) != RS_STATUS_OK || n != 3) return 3;
    if (rs_fit_beta(f, 5, beta, 3, &n) != RS_STATUS_INVALID_ARGUMENT) return 4;
    if (rs_last_error() == NULL) return 5;
    printf("%.6f %.6f %.6f\n", beta[0], beta[1], beta[2]);
    rs_fit_free(f); rs_dataset_free(d); rs_census_free(c);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let cc = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let out = String::from_utf8(run.stdout).unwrap();
    assert_eq!(out.split_whitespace().count(), 3);
}
