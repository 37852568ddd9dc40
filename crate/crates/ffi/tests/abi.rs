use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use docrep::imaging::GrayImage;
use docrep::pipeline::extract::fit_ncm;
use docrep::pipeline::{FeatureMeta, FeatureSet};
use docrep::runlength::{rl_from_gray, RlConfig};
use docrep_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(docrep_last_error()) }.to_str().unwrap().to_string()
}

fn page() -> (Vec<f32>, usize, usize) {
    let (w, h) = (120, 90);
    let img = GrayImage::from_fn(w, h, |x, y| if (x / 7 + y / 5) % 3 == 0 { 0.0 } else { 1.0 }).unwrap();
    (img.data().to_vec(), w, h)
}

fn small_set() -> FeatureSet {
    let meta = FeatureMeta {
        descriptor: "toy".into(),
        config_hash: "abc".into(),
    };
    FeatureSet::new(
        vec!["a".into(), "b".into(), "c".into(), "d".into()],
        2,
        vec![0.0, 0.0, 0.2, 0.0, 5.0, 5.0, 5.2, 5.0],
        Some(vec!["left".into(), "left".into(), "right".into(), "right".into()]),
        meta,
    )
    .unwrap()
}

#[test]
fn rl_descriptor_matches_library() {
    let (px, w, h) = page();
    let n = docrep_rl_len();
    let mut out = vec![0.0; n];
    let st = unsafe { docrep_rl_descriptor(px.as_ptr(), w, h, out.as_mut_ptr(), n) };
    assert_eq!(st, DocrepStatus::Ok, "{}", last_error());
    let lib = rl_from_gray(&GrayImage::new(w, h, px.clone()).unwrap(), &RlConfig::default()).unwrap();
    assert_eq!(out, lib.values());

    let mut short = vec![0.0; n - 1];
    let st = unsafe { docrep_rl_descriptor(px.as_ptr(), w, h, short.as_mut_ptr(), n - 1) };
    assert_eq!(st, DocrepStatus::BufferTooSmall);
    let st = unsafe { docrep_rl_descriptor(px.as_ptr(), w + 1, h, out.as_mut_ptr(), n) };
    assert_eq!(st, DocrepStatus::InvalidArgument);
    let st = unsafe { docrep_rl_descriptor(ptr::null(), w, h, out.as_mut_ptr(), n) };
    assert_eq!(st, DocrepStatus::InvalidArgument);
    assert!(last_error().contains("null"));
}

#[test]
fn encoder_rl_agrees_with_descriptor_call() {
    let (px, w, h) = page();
    let name = CString::new("rl").unwrap();
    let mut enc = ptr::null_mut();
    let st = unsafe { docrep_encoder_new(name.as_ptr(), ptr::null(), ptr::null(), ptr::null(), ptr::null(), &mut enc) };
    assert_eq!(st, DocrepStatus::Ok, "{}", last_error());
    let d = unsafe { docrep_encoder_dim(enc) };
    assert_eq!(d, docrep_rl_len());
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    unsafe {
        assert_eq!(docrep_encoder_encode(enc, px.as_ptr(), w, h, a.as_mut_ptr(), d), DocrepStatus::Ok);
        assert_eq!(docrep_rl_descriptor(px.as_ptr(), w, h, b.as_mut_ptr(), d), DocrepStatus::Ok);
        docrep_encoder_free(enc);
    }
    assert_eq!(a, b);

    let fv = CString::new("fv16").unwrap();
    let mut enc = ptr::null_mut();
    let st = unsafe { docrep_encoder_new(fv.as_ptr(), ptr::null(), ptr::null(), ptr::null(), ptr::null(), &mut enc) };
    assert_eq!(st, DocrepStatus::InvalidArgument);
    assert!(enc.is_null());
    assert!(!last_error().is_empty());
    let bad = CString::new("sift").unwrap();
    let st = unsafe { docrep_encoder_new(bad.as_ptr(), ptr::null(), ptr::null(), ptr::null(), ptr::null(), &mut enc) };
    assert_eq!(st, DocrepStatus::InvalidArgument);
}

#[test]
fn featureset_round_trip_and_access() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("in.dfs");
    let dst = dir.path().join("out.dfs");
    let fs = small_set();
    fs.save(&src).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { docrep_featureset_load(cpath(&src).as_ptr(), &mut h) }, DocrepStatus::Ok);
    unsafe {
        assert_eq!(docrep_featureset_rows(h), 4);
        assert_eq!(docrep_featureset_dim(h), 2);
        let mut row = [0f32; 2];
        assert_eq!(docrep_featureset_row(h, 2, row.as_mut_ptr(), 2), DocrepStatus::Ok);
        assert_eq!(row, [5.0, 5.0]);
        assert_eq!(docrep_featureset_row(h, 4, row.as_mut_ptr(), 2), DocrepStatus::InvalidArgument);

        let mut needed = 0usize;
        let mut tiny = [0 as c_char; 1];
        assert_eq!(docrep_featureset_id(h, 3, tiny.as_mut_ptr(), 1, &mut needed), DocrepStatus::BufferTooSmall);
        assert_eq!(needed, 2);
        let mut buf = [0 as c_char; 8];
        assert_eq!(docrep_featureset_id(h, 3, buf.as_mut_ptr(), buf.len(), &mut needed), DocrepStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "d");

        assert_eq!(docrep_featureset_save(h, cpath(&dst).as_ptr()), DocrepStatus::Ok);
        docrep_featureset_free(h);
        docrep_featureset_free(ptr::null_mut());
        assert_eq!(docrep_featureset_rows(ptr::null()), 0);
    }
    assert_eq!(FeatureSet::load(&dst).unwrap(), fs);
}

#[test]
fn load_failures_carry_status_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.dmd");
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { docrep_model_load(cpath(&missing).as_ptr(), &mut m) }, DocrepStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("nope.dmd"));

    let junk = dir.path().join("junk.dfs");
    std::fs::write(&junk, b"not a feature file").unwrap();
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { docrep_featureset_load(cpath(&junk).as_ptr(), &mut f) }, DocrepStatus::Format);
    assert!(last_error().contains("byte 0"));
    assert_eq!(unsafe { docrep_featureset_load(ptr::null(), &mut f) }, DocrepStatus::InvalidArgument);
}

#[test]
fn ncm_model_predicts_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ncm.dmd");
    fit_ncm(&small_set()).unwrap().save(&path).unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { docrep_model_load(cpath(&path).as_ptr(), &mut m) }, DocrepStatus::Ok);
    let mut needed = 0usize;
    let mut buf = [0 as c_char; 16];
    unsafe {
        assert_eq!(docrep_model_kind(m, buf.as_mut_ptr(), buf.len(), &mut needed), DocrepStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "ncm");
        let mut class = usize::MAX;
        assert_eq!(docrep_model_predict(m, [4.0, 6.0].as_ptr(), 2, &mut class), DocrepStatus::Ok);
        assert_eq!(docrep_model_class_name(m, class, buf.as_mut_ptr(), buf.len(), &mut needed), DocrepStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), "right");
        assert_eq!(docrep_model_predict(m, [0.0, 0.0, 0.0].as_ptr(), 3, &mut class), DocrepStatus::InvalidArgument);
        assert_eq!(docrep_model_class_name(m, 9, buf.as_mut_ptr(), buf.len(), &mut needed), DocrepStatus::InvalidArgument);
        docrep_model_free(m);
    }
}

#[test]
fn partition_scores_and_average_precision() {
    let a = [0usize, 0, 1, 1, 2, 2];
    let b = [5usize, 5, 3, 3, 9, 9];
    for metric in [DocrepPartitionMetric::Ami, DocrepPartitionMetric::Ari, DocrepPartitionMetric::VMeasure] {
        let mut s = 0.0;
        assert_eq!(unsafe { docrep_partition_score(metric, a.as_ptr(), b.as_ptr(), 6, &mut s) }, DocrepStatus::Ok);
        assert_eq!(s, 1.0);
    }
    let mut s = 0.0;
    let st = unsafe { docrep_partition_score(DocrepPartitionMetric::Ami, a.as_ptr(), ptr::null(), 6, &mut s) };
    assert_eq!(st, DocrepStatus::InvalidArgument);

    // Relevant at ranks 1 and 3: (1/1 + 2/3) / 2.
    let mut ap = 0.0;
    assert_eq!(unsafe { docrep_average_precision([1u8, 0, 1, 0].as_ptr(), 4, &mut ap) }, DocrepStatus::Ok);
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(unsafe { docrep_average_precision([0u8, 0].as_ptr(), 2, &mut ap) }, DocrepStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export_and_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/docrep.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() > 10);
    for name in &exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["DocrepStatus", "DocrepFeatureSet", "DocrepModel", "DocrepEncoder"] {
        assert!(header.contains(ty));
    }

    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found, skipping compile check");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let c = tmp.path().join("use.c");
    std::fs::write(
        &c,
        "#include \"docrep.h\"\nint main(void) { DocrepStatus s = DOCREP_STATUS_OK; return (int)s + (int)docrep_rl_len() * 0; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&c)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
