use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use avmatch_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = avm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn new_model(preset: &str) -> *mut AvmModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { avm_model_new(c(preset).as_ptr(), 0, &mut m) }, AvmStatus::Ok);
    m
}

fn features(id: &str, modality: AvmModality, frames: usize, dim: usize, seed: u32) -> *mut AvmFeatures {
    let values: Vec<f32> = (0..frames * dim)
        .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97) % 1000) as f32 / 500.0 - 1.0)
        .collect();
    let mut f = ptr::null_mut();
    let st = unsafe { avm_features_new(c(id).as_ptr(), modality, values.as_ptr(), frames, dim, &mut f) };
    assert_eq!(st, AvmStatus::Ok);
    f
}

#[test]
fn model_metadata_and_embedding() {
    let m = new_model("tivm");
    unsafe {
        assert_eq!(avm_model_param_count(m), 13_711_360);
        assert_eq!(avm_model_embed_dim(m), 512);
        assert_eq!(avm_model_feature_dim(m, AvmModality::Video), 1000);
        let f = features("q", AvmModality::Video, 15, 1000, 1);
        let mut out = vec![0f32; 512];
        assert_eq!(avm_model_embed(m, f, out.as_mut_ptr(), out.len()), AvmStatus::Ok);
        let norm: f64 = out.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(avm_model_embed(m, f, out.as_mut_ptr(), 10), AvmStatus::Parameter);
        avm_features_free(f);
        avm_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(avm_model_new(c("vm-x").as_ptr(), 0, &mut m), AvmStatus::Config);
        assert!(m.is_null());
        assert!(last_error().contains("vm-x"));
        assert_eq!(avm_model_new(ptr::null(), 0, &mut m), AvmStatus::NullPointer);
        assert_eq!(avm_model_load(c("/nonexistent/x.cmck").as_ptr(), &mut m), AvmStatus::Io);
        assert!(m.is_null());
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(
            avm_model_new(bad.as_ptr().cast(), 0, &mut m),
            AvmStatus::InvalidUtf8
        );
        let mut p = 0.0;
        assert_eq!(avm_random_baseline(11, 10, &mut p), AvmStatus::Parameter);
        assert_eq!(avm_random_baseline(10, 1622, &mut p), AvmStatus::Ok);
        assert!((p - 10.0 / 1622.0).abs() < 1e-15);
        avm_model_free(ptr::null_mut());
        avm_features_free(ptr::null_mut());
        assert!(!CStr::from_ptr(avm_version()).to_bytes().is_empty());
    }
}

#[test]
fn checkpoint_and_features_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = c(dir.path().join("m.cmck").to_str().unwrap());
    let fp = c(dir.path().join("clip7.cmf").to_str().unwrap());
    unsafe {
        let m = new_model("ivm-ms");
        assert_eq!(avm_model_save(m, ck.as_ptr()), AvmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(avm_model_load(ck.as_ptr(), &mut back), AvmStatus::Ok);

        let f = features("clip7", AvmModality::Audio, 15, 128, 3);
        assert_eq!(avm_features_write(f, fp.as_ptr()), AvmStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(avm_features_read(fp.as_ptr(), &mut g), AvmStatus::Ok);
        let (mut t, mut d) = (0, 0);
        assert_eq!(avm_features_shape(g, &mut t, &mut d), AvmStatus::Ok);
        assert_eq!((t, d), (15, 128));

        let mut e1 = vec![0f32; 512];
        let mut e2 = vec![0f32; 512];
        assert_eq!(avm_model_embed(m, f, e1.as_mut_ptr(), 512), AvmStatus::Ok);
        assert_eq!(avm_model_embed(back, g, e2.as_mut_ptr(), 512), AvmStatus::Ok);
        assert_eq!(e1, e2);

        std::fs::write(dir.path().join("cut.cmck"), &std::fs::read(dir.path().join("m.cmck")).unwrap()[..100]).unwrap();
        let mut cut = ptr::null_mut();
        let cutp = c(dir.path().join("cut.cmck").to_str().unwrap());
        assert_eq!(avm_model_load(cutp.as_ptr(), &mut cut), AvmStatus::Corruption);
        assert!(cut.is_null());

        for h in [f, g] {
            avm_features_free(h);
        }
        avm_model_free(m);
        avm_model_free(back);
    }
}

#[test]
fn recommend_returns_a_ranking() {
    unsafe {
        let m = new_model("ivm-m");
        let q = features("q", AvmModality::Video, 15, 1000, 9);
        let cands: Vec<*mut AvmFeatures> = (0..5)
            .map(|i| features(&format!("a{i}"), AvmModality::Audio, 15, 128, i))
            .collect();
        // a duplicate of candidate 2 at position 5
        let dup = features("a2", AvmModality::Audio, 15, 128, 2);
        let mut all: Vec<*const AvmFeatures> = cands.iter().map(|&p| p as *const _).collect();
        all.push(dup);
        let mut idx = vec![usize::MAX; 6];
        let mut sc = vec![0f64; 6];
        let st = avm_recommend(m, q, all.as_ptr(), all.len(), 6, idx.as_mut_ptr(), sc.as_mut_ptr());
        assert_eq!(st, AvmStatus::Ok, "{}", last_error());
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        assert!(sc.windows(2).all(|w| w[0] >= w[1]));
        let p2 = idx.iter().position(|&i| i == 2).unwrap();
        let p5 = idx.iter().position(|&i| i == 5).unwrap();
        assert_eq!(p5, p2 + 1);

        // wrong query modality and wrong feature width are configuration errors
        let st = avm_recommend(m, all[0], all.as_ptr(), all.len(), 1, idx.as_mut_ptr(), sc.as_mut_ptr());
        assert_eq!(st, AvmStatus::Config);
        let wide = features("w", AvmModality::Video, 15, 999, 1);
        let st = avm_recommend(m, wide, all.as_ptr(), all.len(), 1, idx.as_mut_ptr(), sc.as_mut_ptr());
        assert_eq!(st, AvmStatus::Config);
        let st = avm_recommend(m, q, all.as_ptr(), all.len(), 7, idx.as_mut_ptr(), sc.as_mut_ptr());
        assert_eq!(st, AvmStatus::Parameter);

        for h in cands.into_iter().chain([dup, q, wide]) {
            avm_features_free(h);
        }
        avm_model_free(m);
    }
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/capi-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = std::fs::read_to_string(header_dir.join("avmatch.h")).unwrap();
    for f in ["avm_model_load", "avm_recommend", "avm_random_baseline", "avm_last_error_message"] {
        assert!(header.contains(f), "{f} missing from header");
    }
    let lib = target_dir().join("libavmatch_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "avmatch.h"
int main(void) {
    double p = 0.0;
    if (avm_random_baseline(1, 1622, &p) != AVM_STATUS_OK) return 1;
    AvmModel *m = NULL;
    if (avm_model_new("nope", 0, &m) != AVM_STATUS_CONFIG || m != NULL) return 2;
    if (avm_last_error_message() == NULL) return 3;
    if (avm_model_new("vm-m", 0, &m) != AVM_STATUS_OK) return 4;
    size_t dim = avm_model_embed_dim(m);
    avm_model_free(m);
    printf("%.6f %zu\n", p * 100.0, dim);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("a C compiler is available");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "0.061652 512");
}
