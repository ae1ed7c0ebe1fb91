use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ccr_core::activations::write_activations;
use ccr_core::prompting::mock_embeddings;
use ccr_core::task::{generate_synthetic, SyntheticKind};
use ccr_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ccr_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn kendall_tau_and_errors() {
    let mut tau = 0.0;
    let gold = [0usize, 1, 2, 3];
    let rev = [3usize, 2, 1, 0];
    unsafe {
        assert_eq!(ccr_kendall_tau(rev.as_ptr(), gold.as_ptr(), 4, &mut tau), CcrStatus::Ok);
        assert_eq!(tau, -1.0);
        assert_eq!(last_error(), "");
        let dup = [0usize, 0, 1, 2];
        assert_eq!(ccr_kendall_tau(dup.as_ptr(), gold.as_ptr(), 4, &mut tau), CcrStatus::Validation);
        assert!(last_error().contains("permutation"));
        assert_eq!(ccr_kendall_tau(ptr::null(), gold.as_ptr(), 4, &mut tau), CcrStatus::NullPointer);
        assert_eq!(ccr_kendall_tau(gold.as_ptr(), gold.as_ptr(), 4, ptr::null_mut()), CcrStatus::NullPointer);
    }
}

#[test]
fn coral_biases_uniform_prior() {
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(ccr_coral_biases(1.0, 1.0, 4, out.as_mut_ptr()), CcrStatus::Ok);
        assert_eq!(ccr_coral_biases(-1.0, 1.0, 4, out.as_mut_ptr()), CcrStatus::InvalidArgument);
    }
    let mut ok = [0.0; 4];
    unsafe { ccr_coral_biases(1.0, 1.0, 4, ok.as_mut_ptr()) };
    for (b, want) in ok.iter().zip([1.5, 0.5, -0.5, -1.5]) {
        assert!((b - want).abs() < 1e-12);
    }
}

#[test]
fn train_save_load_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(SyntheticKind::SynthFacts, 0);
    let ds_path = dir.path().join("ds.json");
    std::fs::write(&ds_path, ds.to_json().unwrap()).unwrap();
    let task = &ds.tasks[0];
    let recs = mock_embeddings(task, 8, 0.0, 3).unwrap();
    let dump = dir.path().join("act.jsonl");
    write_activations(&dump, &recs).unwrap();

    unsafe {
        let mut handle = ptr::null_mut();
        assert_eq!(ccr_dataset_load(cstr(&ds_path).as_ptr(), &mut handle), CcrStatus::Ok);
        assert_eq!(ccr_dataset_task_count(handle), 2);

        let method = CString::new("TripletCCR-S").unwrap();
        let mut probe = ptr::null_mut();
        let st = ccr_train_from_dump(handle, 0, cstr(&dump).as_ptr(), method.as_ptr(), 50, 7, &mut probe);
        assert_eq!(st, CcrStatus::Ok, "{}", last_error());
        assert_eq!(ccr_probe_dim(probe), 8);

        let bad = CString::new("prompt-L").unwrap();
        let mut none = ptr::null_mut();
        let st = ccr_train_from_dump(handle, 0, cstr(&dump).as_ptr(), bad.as_ptr(), 5, 0, &mut none);
        assert_eq!(st, CcrStatus::InvalidArgument);
        assert!(none.is_null());
        let st = ccr_train_from_dump(handle, 9, cstr(&dump).as_ptr(), method.as_ptr(), 5, 0, &mut none);
        assert_eq!(st, CcrStatus::InvalidArgument);

        let saved = dir.path().join("probe.json");
        assert_eq!(ccr_probe_save(probe, cstr(&saved).as_ptr()), CcrStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(ccr_probe_load(cstr(&saved).as_ptr(), &mut loaded), CcrStatus::Ok);

        let flat: Vec<f64> = recs.iter().flat_map(|r| r.vector.clone()).collect();
        let (mut a, mut b) = (vec![0.0; 6], vec![0.0; 6]);
        assert_eq!(ccr_probe_item_scores(probe, flat.as_ptr(), 6, 8, a.as_mut_ptr()), CcrStatus::Ok);
        assert_eq!(ccr_probe_item_scores(loaded, flat.as_ptr(), 6, 8, b.as_mut_ptr()), CcrStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(
            ccr_probe_item_scores(probe, flat.as_ptr(), 8, 6, a.as_mut_ptr()),
            CcrStatus::Dimension
        );

        let missing = dir.path().join("nope.json");
        let mut p2 = ptr::null_mut();
        assert_eq!(ccr_probe_load(cstr(&missing).as_ptr(), &mut p2), CcrStatus::Io);
        assert!(last_error().contains("nope.json"));

        ccr_probe_free(probe);
        ccr_probe_free(loaded);
        ccr_probe_free(ptr::null_mut());
        ccr_dataset_free(handle);
    }
}

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/<test-binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include").join("ccr.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "ccr_last_error_message",
        "ccr_kendall_tau",
        "ccr_coral_biases",
        "ccr_dataset_load",
        "ccr_probe_item_scores",
        "ccr_train_from_dump",
        "typedef struct CcrProbe CcrProbe",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }

    let lib = target_dir().join("libccr_ffi.a");
    let cc = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
        .expect("a C compiler on PATH");
    assert!(lib.exists(), "static library missing at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "ccr.h"
int main(void) {
    size_t pred[4] = {3, 2, 1, 0}, gold[4] = {0, 1, 2, 3};
    double tau = 0.0, b[4];
    if (ccr_kendall_tau(pred, gold, 4, &tau) != CCR_STATUS_OK) return 1;
    if (ccr_coral_biases(1.0, 1.0, 4, b) != CCR_STATUS_OK) return 2;
    if (ccr_kendall_tau(pred, pred, 0, &tau) == CCR_STATUS_OK) return 3;
    printf("%.3f %.3f %s\n", tau, b[0], ccr_version());
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("-1.000 1.500 "), "{stdout}");
}
