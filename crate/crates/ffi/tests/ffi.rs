//! C ABI behaviour: status codes, error messages, handles and buffers.

use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use clover_ffi::*;

const FIG1: &str = r#"
bottom_ids = ["1", "2", "3", "4"]
top_included = true

[levels.halves]
A = ["1", "2"]
B = ["3", "4"]
"#;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { clover_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn hierarchy(text: &str) -> *mut CloverHierarchy {
    let c = CString::new(text).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { clover_hierarchy_from_toml(c.as_ptr(), &mut h) }, CloverStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn hierarchy_handle_round_trip() {
    let h = hierarchy(FIG1);
    let (mut rows, mut bottom) = (0usize, 0usize);
    unsafe {
        assert_eq!(clover_hierarchy_dims(h, &mut rows, &mut bottom), CloverStatus::Ok);
        assert_eq!((rows, bottom), (7, 4));
        let mut m = vec![0.0; 28];
        assert_eq!(clover_hierarchy_matrix(h, m.as_mut_ptr(), m.len()), CloverStatus::Ok);
        assert_eq!(&m[..12], &[1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 1., 1.]);

        let bottom_vals = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0];
        let mut all = vec![0.0; 14];
        assert_eq!(clover_hierarchy_aggregate(h, bottom_vals.as_ptr(), 8, 2, all.as_mut_ptr(), 14), CloverStatus::Ok);
        assert_eq!(&all[..6], &[10.0, 100.0, 3.0, 30.0, 7.0, 70.0]);

        let mut short = vec![0.0; 13];
        assert_eq!(clover_hierarchy_aggregate(h, bottom_vals.as_ptr(), 8, 2, short.as_mut_ptr(), 13), CloverStatus::ShapeMismatch);
        assert!(last_error().contains("13"));
        clover_hierarchy_free(h);
        clover_hierarchy_free(ptr::null_mut());
    }
}

#[test]
fn invalid_hierarchies_report_errors() {
    let mut h = ptr::null_mut();
    let bad = CString::new("bottom_ids = [\"a\", \"a\"]\ntop_included = true\n").unwrap();
    assert_eq!(unsafe { clover_hierarchy_from_toml(bad.as_ptr(), &mut h) }, CloverStatus::InvalidHierarchy);
    assert!(h.is_null());
    assert!(last_error().contains("duplicate"), "{}", last_error());
    assert_eq!(unsafe { clover_hierarchy_from_toml(ptr::null(), &mut h) }, CloverStatus::NullPointer);
    let garbage = CString::new("bottom_ids = 3").unwrap();
    assert_eq!(unsafe { clover_hierarchy_from_toml(garbage.as_ptr(), &mut h) }, CloverStatus::InvalidHierarchy);
    assert!(last_error().contains("bottom_ids"), "{}", last_error());
    let (mut r, mut b) = (0, 0);
    assert_eq!(unsafe { clover_hierarchy_dims(ptr::null(), &mut r, &mut b) }, CloverStatus::NullPointer);
}

#[test]
fn scores_match_the_core() {
    let samples = [0.3, -1.2, 0.8, 2.0, -0.1];
    let mut v = 0.0;
    unsafe {
        assert_eq!(clover_crps(0.5, samples.as_ptr(), samples.len(), &mut v), CloverStatus::Ok);
        assert_eq!(v, clover::scoring::crps_empirical(0.5, &samples).unwrap());

        // one dimension with beta 1 is the CRPS
        let mut e = 0.0;
        assert_eq!(clover_energy_score([0.5].as_ptr(), 1, samples.as_ptr(), samples.len(), 1.0, &mut e), CloverStatus::Ok);
        assert!((e - v).abs() <= 1e-12);

        assert_eq!(clover_crps_normal(0.0, 0.0, 1.0, &mut v), CloverStatus::Ok);
        assert!((v - 0.233_694_977_255_109_1).abs() < 1e-12);
        assert_eq!(clover_crps_normal(0.0, 0.0, 0.0, &mut v), CloverStatus::InvalidArgument);

        assert_eq!(clover_quantile_loss(2.0, 0.9, 1.0, &mut v), CloverStatus::Ok);
        assert!((v - 0.9).abs() < 1e-15);
        assert_eq!(clover_quantile_loss(2.0, 1.0, 1.0, &mut v), CloverStatus::InvalidArgument);

        assert_eq!(clover_crps(0.0, samples.as_ptr(), 1, &mut v), CloverStatus::InvalidArgument);
        assert_eq!(clover_crps(0.0, samples.as_ptr(), 5, ptr::null_mut()), CloverStatus::NullPointer);
        assert_eq!(clover_energy_score([0.0].as_ptr(), 1, samples.as_ptr(), 5, 2.0, &mut v), CloverStatus::InvalidArgument);
    }
}

#[test]
fn factor_samples_are_coherent_and_deterministic() {
    let h = hierarchy(FIG1);
    let (nb, nk, nh, ns) = (4, 2, 3, 50);
    let mu: Vec<f64> = (0..nb * nh).map(|i| 1.0 + i as f64 * 0.1).collect();
    let sigma = vec![0.5; nb * nh];
    let loadings: Vec<f64> = (0..nb * nk * nh).map(|i| ((i % 5) as f64 - 2.0) * 0.2).collect();
    let draw = |seed: u64| {
        let mut out = vec![0.0; 7 * nh * ns];
        let st = unsafe {
            clover_factor_sample(h, mu.as_ptr(), sigma.as_ptr(), loadings.as_ptr(), nk, nh, ns, seed, out.as_mut_ptr(), out.len())
        };
        assert_eq!(st, CloverStatus::Ok);
        out
    };
    let a = draw(7);
    assert_eq!(a, draw(7));
    assert_ne!(a, draw(8));
    let at = |r: usize, k: usize, i: usize| a[(r * nh + k) * ns + i];
    for k in 0..nh {
        for i in 0..ns {
            let bottom: Vec<f64> = (3..7).map(|r| at(r, k, i)).collect();
            assert!(bottom.iter().all(|&v| v >= 0.0));
            assert!((at(0, k, i) - bottom.iter().sum::<f64>()).abs() <= 1e-12);
            assert!((at(1, k, i) - bottom[0] - bottom[1]).abs() <= 1e-12);
        }
    }
    let mut small = vec![0.0; 10];
    let st = unsafe { clover_factor_sample(h, mu.as_ptr(), sigma.as_ptr(), loadings.as_ptr(), nk, nh, ns, 0, small.as_mut_ptr(), 10) };
    assert_eq!(st, CloverStatus::ShapeMismatch);
    unsafe { clover_hierarchy_free(h) };
}

/// The generated header must compile as C and declare every entry point.
#[test]
fn header_compiles_as_c() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include").join("clover.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "clover_last_error",
        "clover_hierarchy_from_toml",
        "clover_hierarchy_free",
        "clover_hierarchy_dims",
        "clover_hierarchy_matrix",
        "clover_hierarchy_aggregate",
        "clover_crps",
        "clover_crps_normal",
        "clover_quantile_loss",
        "clover_energy_score",
        "clover_factor_sample",
    ] {
        assert!(text.contains(&format!("{}(", f)), "{} missing from header", f);
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"clover.h\"\n\
         int main(void) {\n\
           CloverHierarchy *h = 0;\n\
           double v = 0.0;\n\
           CloverStatus st = clover_crps_normal(0.0, 0.0, 1.0, &v);\n\
           if (st != CLOVER_STATUS_OK) return 1;\n\
           st = clover_hierarchy_from_toml(\"bottom_ids = [\\\"a\\\"]\", &h);\n\
           clover_hierarchy_free(h);\n\
           return (int)st;\n\
         }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .output()
        .expect("a C compiler is available");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
