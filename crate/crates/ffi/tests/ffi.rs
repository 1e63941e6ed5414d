use std::ffi::CStr;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use heavytail::influence::{phi_asym, phi_sq, phi_sym, SmoothInput};
use heavytail_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn normals(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn last_error() -> String {
    let p = ht_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn phi_matches_the_library() {
    for (kind, f) in [(0, phi_sym as fn(SmoothInput) -> f64), (1, phi_asym), (2, phi_sq)] {
        let mut out = 0.0;
        assert_eq!(unsafe { ht_phi(kind, 0.7, 0.3, &mut out) }, HtStatus::Ok);
        assert_eq!(out, f(SmoothInput::new(0.7, 0.3).unwrap()));
    }
    let mut out = 0.0;
    assert_eq!(unsafe { ht_phi(0, 0.0, -1.0, &mut out) }, HtStatus::Domain);
    assert!(last_error().contains("scale"));
    assert_eq!(unsafe { ht_phi(9, 0.0, 1.0, &mut out) }, HtStatus::InvalidInput);
    assert_eq!(unsafe { ht_phi(0, 0.0, 1.0, ptr::null_mut()) }, HtStatus::NullPointer);
    assert_eq!(unsafe { ht_phi(0, 0.0, 1.0, &mut out) }, HtStatus::Ok);
    assert!(ht_last_error().is_null());
}

#[test]
fn mean_round_trip() {
    let (n, d) = (300, 3);
    let mut data = normals(n * d, 1);
    for (k, x) in data.iter_mut().enumerate() {
        *x += [1.0, 2.0, -1.0][k % d];
    }
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(ht_vector_sample_new(data.as_ptr(), n, d, &mut s), HtStatus::Ok);
        let mut est = ptr::null_mut();
        assert_eq!(ht_estimate_mean(s, 1.0, 3.0, 0.05, 7, &mut est), HtStatus::Ok);
        let mut dim = 0;
        assert_eq!(ht_mean_estimate_dim(est, &mut dim), HtStatus::Ok);
        assert_eq!(dim, d);
        let mut m = vec![0.0; d];
        assert_eq!(ht_mean_estimate_m_hat(est, m.as_mut_ptr(), d), HtStatus::Ok);
        let (mut r, mut ok) = (0.0, false);
        ht_mean_estimate_radius(est, &mut r);
        ht_mean_estimate_certified(est, &mut ok);
        let err = ((m[0] - 1.0).powi(2) + (m[1] - 2.0).powi(2) + (m[2] + 1.0).powi(2)).sqrt();
        assert!(ok && err <= r, "{err} {r}");
        assert_eq!(ht_mean_estimate_m_hat(est, m.as_mut_ptr(), d - 1), HtStatus::BufferTooSmall);
        ht_mean_estimate_free(est);
        ht_vector_sample_free(s);
    }
}

#[test]
fn bad_inputs_are_reported() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(ht_vector_sample_new(ptr::null(), 3, 2, &mut s), HtStatus::NullPointer);
        assert!(s.is_null());
        let data = [1.0, f64::NAN];
        assert_eq!(ht_vector_sample_new(data.as_ptr(), 1, 2, &mut s), HtStatus::InvalidInput);
        assert!(!last_error().is_empty());
        let data = [1.0, 2.0];
        assert_eq!(ht_vector_sample_new(data.as_ptr(), 1, 2, &mut s), HtStatus::Ok);
        let mut est = ptr::null_mut();
        assert_eq!(ht_estimate_mean(s, -1.0, 1.0, 0.05, 0, &mut est), HtStatus::Domain);
        assert_eq!(ht_estimate_mean(ptr::null(), 1.0, 1.0, 0.05, 0, &mut est), HtStatus::NullPointer);
        assert!(est.is_null());
        ht_vector_sample_free(s);
        ht_vector_sample_free(ptr::null_mut());
        ht_mean_estimate_free(ptr::null_mut());
        let mut r = 0.0;
        assert_eq!(ht_mean_estimate_radius(ptr::null(), &mut r), HtStatus::NullPointer);
    }
}

#[test]
fn matrix_and_gram_handles() {
    let (n, p, q) = (100, 2, 2);
    let data = normals(n * p * q, 2);
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(ht_matrix_sample_new(data.as_ptr(), n, p, q, &mut s), HtStatus::Ok);
        let bounds = HtMatrixBounds { v: 1.0, t: 2.0, u: 2.0, t_hs: 4.0 };
        let mut est = ptr::null_mut();
        assert_eq!(ht_fit_matrix_operator(s, bounds, 0.05, 32, 3, &mut est), HtStatus::Ok);
        let mut m = [0.0; 4];
        assert_eq!(ht_matrix_estimate_m_hat(est, m.as_mut_ptr(), 4), HtStatus::Ok);
        let (mut r, mut se, mut ok) = (0.0, 0.0, false);
        ht_matrix_estimate_op_radius(est, &mut r);
        ht_matrix_estimate_mc_stderr(est, &mut se);
        ht_matrix_estimate_certified(est, &mut ok);
        assert!(ok && r > 0.0 && se >= 0.0);
        let fro = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(fro <= 2.0 * r, "{fro} {r}");
        ht_matrix_estimate_free(est);
        ht_matrix_sample_free(s);

        let x = normals(120 * 2, 3);
        let mut vs = ptr::null_mut();
        assert_eq!(ht_vector_sample_new(x.as_ptr(), 120, 2, &mut vs), HtStatus::Ok);
        let mut g = ptr::null_mut();
        assert_eq!(ht_fit_gram(vs, 8.0, 0.05, 1, &mut g), HtStatus::Ok);
        let mut gh = [0.0; 4];
        let mut sig = [0.0; 2];
        assert_eq!(ht_gram_estimate_g_hat(g, gh.as_mut_ptr(), 4), HtStatus::Ok);
        assert_eq!(ht_gram_estimate_sigma_hat(g, sig.as_mut_ptr(), 2), HtStatus::Ok);
        let mut gap = 0.0;
        ht_gram_estimate_sup_gap(g, &mut gap);
        assert_eq!(gh[1], gh[2]);
        assert!(sig[0] >= sig[1] && sig[1] >= 0.0 && gap >= 0.0);
        assert_eq!(ht_fit_gram(vs, -1.0, 0.05, 1, &mut g), HtStatus::Domain);
        ht_gram_estimate_free(g);
        ht_vector_sample_free(vs);
    }
}

#[test]
fn regression_region() {
    let (n, d) = (2000, 2);
    let x = normals(n * d, 4);
    let e = normals(n, 5);
    let y: Vec<f64> = (0..n).map(|i| x[i * d] - 0.5 * x[i * d + 1] + 0.5 * e[i]).collect();
    let bounds = HtRegressionBounds { v: 3.0, t: 8.0, v_prime: 4.0, t_prime: 8.0 };
    unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(ht_regress(x.as_ptr(), y.as_ptr(), n, d, bounds, 0.1, 0.05, 32, 1, &mut r), HtStatus::Ok);
        let mut theta = [0.0; 2];
        assert_eq!(ht_region_theta(r, theta.as_mut_ptr(), 2), HtStatus::Ok);
        let (mut eps, mut eta) = (0.0, 0.0);
        ht_region_radii(r, &mut eps, &mut eta);
        assert!(eps > 0.0 && eps < 1.0 && eta > 0.0);
        let mut inside = false;
        assert_eq!(ht_region_contains(r, theta.as_ptr(), 2, &mut inside), HtStatus::Ok);
        assert!(inside);
        let far = [1e3, -1e3];
        ht_region_contains(r, far.as_ptr(), 2, &mut inside);
        assert!(!inside);
        assert_eq!(ht_region_contains(r, far.as_ptr(), 1, &mut inside), HtStatus::InvalidInput);
        ht_region_free(r);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/heavytail.h")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let mut count = 0;
    for line in src.lines().filter(|l| l.contains("extern \"C\" fn ")) {
        let name = line.split("fn ").nth(1).unwrap().split('(').next().unwrap();
        assert!(h.contains(&format!("{name}(")), "{name} missing from the header");
        count += 1;
    }
    assert!(count >= 25);
    for ty in ["typedef struct HtVectorSample HtVectorSample;", "HT_STATUS_BUFFER_TOO_SMALL = 5", "double t_prime;"] {
        assert!(h.contains(ty), "{ty}");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let target = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/debug");
    let lib = target.join("libheavytail_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/smoke.c"))
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("a C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8(out.stdout).unwrap().split_whitespace().count(), 3);
}
