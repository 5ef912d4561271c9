use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mobility_trends_ffi::*;

fn last_error() -> String {
    let p = mt_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn tspp_matches_window_mean() {
    let values: Vec<f64> = (0..20).map(|i| (i * i) as f64).collect();
    let mut out = vec![0.0; 14];
    let status = unsafe { mt_tspp(values.as_ptr(), 20, 3, out.as_mut_ptr(), 14) };
    assert_eq!(status, MtStatus::Ok);
    for (k, v) in out.iter().enumerate() {
        let brute = values[k..k + 7].iter().sum::<f64>() / 7.0;
        assert!((v - brute).abs() < 1e-12);
    }
    let status = unsafe { mt_tspp(values.as_ptr(), 20, 3, out.as_mut_ptr(), 13) };
    assert_eq!(status, MtStatus::InvalidArgument);
    assert!(last_error().contains("expected 14"));
    let status = unsafe { mt_tspp(ptr::null(), 20, 3, out.as_mut_ptr(), 14) };
    assert_eq!(status, MtStatus::NullPointer);
}

#[test]
fn decomposition_round_trip() {
    // rank one: column j is (j + 1) · t, with t zero-mean
    let (days, regions) = (10, 4);
    let values: Vec<f64> = (0..days)
        .flat_map(|d| (0..regions).map(move |j| (j + 1) as f64 * (d as f64 - 4.5)))
        .collect();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(mt_delta_matrix_new(values.as_ptr(), days, regions, &mut m), MtStatus::Ok);
        assert_eq!(mt_delta_matrix_regions(m), 4);
        let mut dec = ptr::null_mut();
        assert_eq!(mt_decompose(m, 2, true, &mut dec), MtStatus::Ok);
        assert_eq!(mt_decomposition_k(dec), 2);
        let mut ratios = [0.0; 2];
        let mut total = 0.0;
        assert_eq!(mt_decomposition_explained(dec, ratios.as_mut_ptr(), 2, &mut total), MtStatus::Ok);
        assert!((ratios[0] - 1.0).abs() < 1e-12);
        assert!((total - 1.0).abs() < 1e-12);
        let mut loadings = [0.0; 8];
        assert_eq!(mt_decomposition_loadings(dec, loadings.as_mut_ptr(), 8), MtStatus::Ok);
        // first-column loadings are proportional to 1, 2, 3, 4 and sum positive
        for j in 0..4 {
            assert!((loadings[2 * j] / loadings[0] - (j + 1) as f64).abs() < 1e-9);
        }
        assert!(loadings[0] > 0.0);
        let mut comps = [0.0; 20];
        assert_eq!(mt_decomposition_components(dec, comps.as_mut_ptr(), 20), MtStatus::Ok);
        assert_eq!(mt_decomposition_components(dec, comps.as_mut_ptr(), 19), MtStatus::InvalidArgument);
        let mut sv = [0.0; 2];
        assert_eq!(mt_decomposition_singular_values(dec, sv.as_mut_ptr(), 2), MtStatus::Ok);
        assert!(sv[0] >= sv[1]);
        assert_eq!(mt_decompose(m, 0, true, &mut dec), MtStatus::InvalidArgument);
        mt_decomposition_free(dec);
        mt_delta_matrix_free(m);
        mt_delta_matrix_free(ptr::null_mut());
    }
}

#[test]
fn outlier_removal_replaces_matrix() {
    let (days, regions) = (30, 40);
    let mut values = vec![0.0; days * regions];
    for d in 0..days {
        for j in 0..regions {
            let t = (d as f64 * 0.7).sin();
            let s = (d as f64 * 0.3).cos();
            let w = if j == 0 { 25.0 } else { 1.0 + (j % 5) as f64 * 0.1 };
            values[d * regions + j] = w * t + ((j * 7) % 11) as f64 * 0.05 * s;
        }
    }
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(mt_delta_matrix_new(values.as_ptr(), days, regions, &mut m), MtStatus::Ok);
        let mut removed = 0;
        assert_eq!(mt_remove_outliers(&mut m, 4.0, true, &mut removed), MtStatus::Ok);
        assert_eq!(mt_delta_matrix_regions(m), regions - removed);
        assert!(removed >= 1);
        mt_delta_matrix_free(m);
    }
}

fn ring_weights(n: usize) -> *mut MtWeights {
    let offsets: Vec<usize> = (0..=n).map(|i| 2 * i).collect();
    let neighbors: Vec<usize> = (0..n).flat_map(|i| [(i + n - 1) % n, (i + 1) % n]).collect();
    let mut w = ptr::null_mut();
    let status = unsafe { mt_weights_from_adjacency(offsets.as_ptr(), neighbors.as_ptr(), n, &mut w) };
    assert_eq!(status, MtStatus::Ok);
    w
}

#[test]
fn moran_on_ring() {
    let w = ring_weights(8);
    let alternating: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    unsafe {
        assert_eq!(mt_weights_len(w), 8);
        assert_eq!(mt_weights_degree(w, 3), 2);
        assert_eq!(mt_weights_degree(w, 99), 0);
        let mut r = MtMoranResult {
            i: 0.0,
            expected_i: 0.0,
            variance: 0.0,
            z_score: 0.0,
            p_value: 0.0,
        };
        assert_eq!(
            mt_global_moran(w, alternating.as_ptr(), 8, MtInference::Normality, 0, 0, &mut r),
            MtStatus::Ok
        );
        assert_eq!(r.i, -1.0);
        assert!((r.expected_i + 1.0 / 7.0).abs() < 1e-15);

        assert_eq!(mt_weights_standardize(w, MtStandardization::Row), MtStatus::Ok);
        let smooth: Vec<f64> = (0..8).map(|i| (i as f64 * 0.8).sin()).collect();
        let (mut li, mut pp) = (vec![0.0; 8], vec![0.0; 8]);
        let (mut q, mut sig) = (vec![0i32; 8], vec![0u8; 8]);
        assert_eq!(
            mt_local_moran(w, smooth.as_ptr(), 8, 99, 1, 0.05, li.as_mut_ptr(), pp.as_mut_ptr(), q.as_mut_ptr(), sig.as_mut_ptr()),
            MtStatus::Ok
        );
        assert!(mt_global_moran(w, smooth.as_ptr(), 8, MtInference::Randomization, 0, 0, &mut r) == MtStatus::Ok);
        let mean = li.iter().sum::<f64>() / 8.0;
        assert!((mean - r.i).abs() < 1e-12);
        assert!(pp.iter().all(|p| *p > 0.0 && *p <= 1.0));
        assert!(q.iter().all(|c| (0..4).contains(c)));

        let flat = [2.0; 8];
        assert_eq!(
            mt_global_moran(w, flat.as_ptr(), 8, MtInference::Randomization, 0, 0, &mut r),
            MtStatus::DataError
        );
        assert!(last_error().contains("constant field"));
        mt_weights_free(w);
    }
}

#[test]
fn asymmetric_adjacency_rejected() {
    let offsets = [0usize, 1, 1];
    let neighbors = [1usize];
    let mut w = ptr::null_mut();
    let status = unsafe { mt_weights_from_adjacency(offsets.as_ptr(), neighbors.as_ptr(), 2, &mut w) };
    assert_eq!(status, MtStatus::DataError);
    assert!(w.is_null());
}

#[test]
fn weights_from_geojson_grid() {
    let mut features = Vec::new();
    for r in 0..3 {
        for c in 0..3 {
            let (x, y) = (c as f64, r as f64);
            features.push(format!(
                r#"{{"type":"Feature","properties":{{"id":"{r}{c}"}},"geometry":{{"type":"Polygon","coordinates":[[[{x},{y}],[{x1},{y}],[{x1},{y1}],[{x},{y1}],[{x},{y}]]]}}}}"#,
                x1 = x + 1.0,
                y1 = y + 1.0
            ));
        }
    }
    let text = CString::new(format!(r#"{{"type":"FeatureCollection","features":[{}]}}"#, features.join(","))).unwrap();
    let id = CString::new("id").unwrap();
    let mut w = ptr::null_mut();
    unsafe {
        assert_eq!(mt_weights_from_geojson(text.as_ptr(), id.as_ptr(), 1e-7, &mut w), MtStatus::Ok);
        let degrees: Vec<usize> = (0..9).map(|i| mt_weights_degree(w, i)).collect();
        assert_eq!(degrees, vec![3, 5, 3, 5, 8, 5, 3, 5, 3]);
        mt_weights_free(w);
        let bad = CString::new("{").unwrap();
        assert_eq!(mt_weights_from_geojson(bad.as_ptr(), id.as_ptr(), 1e-7, &mut w), MtStatus::DataError);
    }
}

#[test]
fn pearson_and_kmeans() {
    let x: Vec<f64> = (0..10).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let (mut r, mut p, mut n) = (0.0, 0.0, 0usize);
    unsafe {
        assert_eq!(mt_pearson(x.as_ptr(), y.as_ptr(), 10, &mut r, &mut p, &mut n), MtStatus::Ok);
    }
    assert_eq!((r, p, n), (1.0, 0.0, 10));
    let constant = [1.0; 10];
    unsafe {
        assert_eq!(mt_pearson(x.as_ptr(), constant.as_ptr(), 10, &mut r, &mut p, ptr::null_mut()), MtStatus::DataError);
    }

    let points = [0.0, 0.0, 0.1, 0.0, 10.0, 10.0, 10.1, 10.0, 0.0, 0.1, 10.0, 10.1];
    let mut labels = [0usize; 6];
    let mut inertia = 0.0;
    unsafe {
        assert_eq!(
            mt_kmeans(points.as_ptr(), 6, 2, 2, 5, 4, 100, labels.as_mut_ptr(), &mut inertia),
            MtStatus::Ok
        );
    }
    assert_eq!(labels[0], labels[1]);
    assert_eq!(labels[0], labels[4]);
    assert_eq!(labels[2], labels[3]);
    assert_ne!(labels[0], labels[2]);
    assert!(inertia < 0.1);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(mt_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mobility_trends.h")).unwrap();
    for name in [
        "typedef struct MtWeights MtWeights;",
        "MtStatus mt_global_moran(",
        "MtStatus mt_decompose(",
        "void mt_weights_free(",
        "MT_STATUS_NULL_POINTER = 1",
        "const char *mt_last_error_message(void);",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}

/// Compiles a small C program against the header and static library.
#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libmobility_trends_ffi.a");
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mobility_trends.h"
int main(void) {
    double v[9] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
    double out[3];
    if (mt_tspp(v, 9, 3, out, 3) != MT_STATUS_OK) return 1;
    if (out[0] != 4.0 || out[2] != 6.0) return 2;
    size_t offsets[5] = {0, 2, 4, 6, 8};
    size_t nb[8] = {1, 2, 0, 3, 0, 3, 1, 2};
    MtWeights *w = NULL;
    if (mt_weights_from_adjacency(offsets, nb, 4, &w) != MT_STATUS_OK) return 3;
    double x[4] = {1, -1, -1, 1};
    MtMoranResult r;
    if (mt_global_moran(w, x, 4, MT_INFERENCE_NORMALITY, 0, 0, &r) != MT_STATUS_OK) return 4;
    mt_weights_free(w);
    if (r.i != -1.0) return 5;
    if (mt_tspp(NULL, 9, 3, out, 3) != MT_STATUS_NULL_POINTER) return 6;
    if (mt_last_error_message() == NULL) return 7;
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout), "ok\n");
}
