use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use esppct::config::PipelineConfig;
use esppct::pipeline::EspPct;
use esppct_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = esp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.attention.d_attention = 4;
    cfg.attention.k_nn = 3;
    cfg.focus.top_k = 4;
    cfg.head.hidden = Some(3);
    cfg
}

fn build_sequence() -> *mut EspSequence {
    let mut seq = ptr::null_mut();
    unsafe {
        assert_eq!(esp_sequence_new(&mut seq), EspStatus::Ok);
        for t in 0..3u64 {
            let pts: Vec<f64> = (0..6)
                .flat_map(|i| {
                    let x = i as f64 * 0.05 + t as f64 * 0.01;
                    [x, 0.1, 1.0, 0.2, 0.5]
                })
                .collect();
            assert_eq!(esp_sequence_push_frame(seq, t, pts.as_ptr(), 6), EspStatus::Ok);
        }
    }
    seq
}

#[test]
fn sequence_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("a.esq"));
    let seq = build_sequence();
    unsafe {
        assert_eq!(esp_sequence_push_frame(seq, 3, ptr::null(), 0), EspStatus::Ok);
        assert_eq!(esp_sequence_write(seq, path.as_ptr()), EspStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(esp_sequence_load(path.as_ptr(), &mut back), EspStatus::Ok);
        let mut n = 0usize;
        assert_eq!(esp_sequence_frame_count(back, &mut n), EspStatus::Ok);
        assert_eq!(n, 4);
        assert_eq!(esp_sequence_point_count(back, 1, &mut n), EspStatus::Ok);
        assert_eq!(n, 6);
        assert_eq!(esp_sequence_point_count(back, 3, &mut n), EspStatus::Ok);
        assert_eq!(n, 0);
        assert_eq!(esp_sequence_point_count(back, 9, &mut n), EspStatus::InvalidConfig);
        esp_sequence_free(back);
        esp_sequence_free(seq);
    }
}

#[test]
fn bad_arguments_report_codes_and_messages() {
    unsafe {
        let mut seq = ptr::null_mut();
        assert_eq!(esp_sequence_load(ptr::null(), &mut seq), EspStatus::NullArgument);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/x.esq").unwrap();
        assert_eq!(esp_sequence_load(missing.as_ptr(), &mut seq), EspStatus::Data);
        assert!(last_error().contains("/nonexistent/x.esq"));
        assert!(seq.is_null());

        let bad = [0xffu8, 0];
        assert_eq!(esp_sequence_load(bad.as_ptr().cast(), &mut seq), EspStatus::InvalidUtf8);

        // repeated timestamp is rejected and leaves the sequence unchanged
        let s = build_sequence();
        let p = [0.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(esp_sequence_push_frame(s, 2, p.as_ptr(), 1), EspStatus::Data);
        let mut n = 0;
        esp_sequence_frame_count(s, &mut n);
        assert_eq!(n, 3);
        let nan = [f64::NAN, 0.0, 1.0, 0.0, 1.0];
        assert_ne!(esp_sequence_push_frame(s, 7, nan.as_ptr(), 1), EspStatus::Ok);
        assert_eq!(esp_sequence_push_frame(s, 7, ptr::null(), 1), EspStatus::NullArgument);
        esp_sequence_free(s);

        // a successful call clears the message
        let mut out = ptr::null_mut();
        assert_eq!(esp_sequence_new(&mut out), EspStatus::Ok);
        assert!(esp_last_error().is_null());
        esp_sequence_free(out);
        esp_sequence_free(ptr::null_mut());
        esp_model_free(ptr::null_mut());
        esp_string_free(ptr::null_mut());
    }
}

#[test]
fn classify_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let model = EspPct::new(small_config(), 5).unwrap();
    model.save(&ckpt, None).unwrap();
    let seq = build_sequence();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(esp_model_load(cstr(&ckpt).as_ptr(), &mut m), EspStatus::Ok);
        let mut classes = 0;
        assert_eq!(esp_model_class_count(m, &mut classes), EspStatus::Ok);
        assert_eq!(classes, 5);
        let (mut label, mut conf) = (u32::MAX, 0.0);
        assert_eq!(esp_model_classify(m, seq, &mut label, &mut conf), EspStatus::Ok);
        let expected = model.predict(&seq_inner(seq)).unwrap();
        assert_eq!(label as usize, expected.label);
        assert_eq!(conf, expected.confidence);
        assert_eq!(esp_model_classify(m, seq, ptr::null_mut(), ptr::null_mut()), EspStatus::Ok);
        assert_eq!(esp_model_classify(ptr::null(), seq, &mut label, &mut conf), EspStatus::NullArgument);
        esp_model_free(m);
        esp_sequence_free(seq);
    }
}

/// Reads the sequence back through the file interface to compare with the library.
unsafe fn seq_inner(seq: *const EspSequence) -> Box<esppct::pointcloud::Sequence> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.esq");
    assert_eq!(esp_sequence_write(seq, cstr(&p).as_ptr()), EspStatus::Ok);
    Box::new(esppct::pointcloud::load_sequence(&p).unwrap())
}

#[test]
fn cost_report_is_json() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(esp_cost_report_json(ptr::null(), 25, 100, &mut s), EspStatus::Ok);
        let text = CStr::from_ptr(s).to_str().unwrap().to_owned();
        esp_string_free(s);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let cfg = PipelineConfig::default();
        let flops = esppct::cost::count_flops(&cfg, esppct::cost::InputShape::new(25, 100)).unwrap();
        assert_eq!(v["flops"]["total"].as_u64(), Some(flops.total));
        assert_eq!(v["params"]["total"].as_u64(), Some(esppct::cost::count_params(&cfg).unwrap().total));

        let bad = CString::new(r#"{"focus":{"eta":3.0}}"#).unwrap();
        assert_eq!(esp_cost_report_json(bad.as_ptr(), 1, 1, &mut s), EspStatus::InvalidConfig);
        assert!(last_error().contains("eta"));
        let junk = CString::new("{").unwrap();
        assert_eq!(esp_cost_report_json(junk.as_ptr(), 1, 1, &mut s), EspStatus::Data);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("esppct.h")
}

#[test]
fn header_declares_the_interface() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "esp_last_error",
        "esp_sequence_new",
        "esp_sequence_load",
        "esp_sequence_write",
        "esp_sequence_push_frame",
        "esp_sequence_frame_count",
        "esp_sequence_point_count",
        "esp_sequence_free",
        "esp_model_load",
        "esp_model_class_count",
        "esp_model_classify",
        "esp_model_free",
        "esp_cost_report_json",
        "esp_string_free",
        "ESP_STATUS_OK",
        "typedef struct EspModel EspModel",
        "typedef struct EspSequence EspSequence",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

/// The `deps` dir this test runs from; cargo writes the fresh cdylib there.
fn lib_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler ({cc}); skipping");
        return;
    }
    let libdir = lib_dir();
    assert!(
        libdir.join("libesppct_ffi.so").exists() || libdir.join("libesppct_ffi.a").exists(),
        "library not found in {}",
        libdir.display()
    );
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include <string.h>
#include "esppct.h"

int main(void) {
    char *json = NULL;
    if (esp_cost_report_json(NULL, 25, 100, &json) != ESP_STATUS_OK) return 10;
    if (strstr(json, "\"flops\"") == NULL) return 11;
    esp_string_free(json);

    EspSequence *seq = NULL;
    if (esp_sequence_new(&seq) != ESP_STATUS_OK) return 12;
    double pts[10] = {0.0, 0.0, 1.0, 0.1, 0.5, 0.1, 0.0, 1.0, 0.1, 0.4};
    if (esp_sequence_push_frame(seq, 0, pts, 2) != ESP_STATUS_OK) return 13;
    size_t n = 0;
    esp_sequence_frame_count(seq, &n);
    if (n != 1) return 14;
    if (esp_sequence_push_frame(seq, 0, pts, 2) != ESP_STATUS_DATA) return 15;
    if (esp_last_error() == NULL) return 16;
    esp_sequence_free(seq);
    if (esp_model_load("/nonexistent.ckpt", NULL) != ESP_STATUS_NULL_ARGUMENT) return 17;
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg("-L")
        .arg(&libdir)
        .arg("-lesppct_ffi")
        .arg("-o")
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).env("LD_LIBRARY_PATH", &libdir).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
