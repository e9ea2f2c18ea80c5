//! Exercise the C ABI exactly the way a foreign caller would: through the
//! exported extern "C" functions with raw pointers and handles.

use std::ffi::{CStr, CString};

use affectlab_ffi::{
    af_ccc, af_evaluate, af_gen_synth_dataset, af_js_divergence, af_last_error, af_model_free,
    af_model_load, af_model_predict, af_model_task, af_report_ccc, af_report_free,
    af_report_score, af_report_text, af_string_free, af_version, AfPrediction, AfReport,
    AfStatus, AfTask,
};

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(af_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn ccc_and_js_match_the_library() {
    let x = [0.1f64, -0.4, 0.8, 0.3];
    let y = [0.2f64, -0.5, 0.7, 0.1];
    let mut out = 0.0f64;
    let st = unsafe { af_ccc(x.as_ptr(), y.as_ptr(), 4, &mut out) };
    assert_eq!(st, AfStatus::AfOk);
    let expect = affectlab::objectives::ccc(&x, &y).unwrap();
    assert_eq!(out, expect);

    let p = [0.25f64, 0.25, 0.5];
    let q = [0.5f64, 0.25, 0.25];
    let st = unsafe { af_js_divergence(p.as_ptr(), q.as_ptr(), 3, &mut out) };
    assert_eq!(st, AfStatus::AfOk);
    assert_eq!(out, affectlab::objectives::js_divergence(&p, &q).unwrap());

    // length mismatch is impossible through this API, but a degenerate
    // vector is: probability that does not sum to 1
    let bad = [0.9f64, 0.9, 0.9];
    let st = unsafe { af_js_divergence(bad.as_ptr(), p.as_ptr(), 3, &mut out) };
    assert_eq!(st, AfStatus::AfInvalidArgument);
    let msg = unsafe { CStr::from_ptr(af_last_error()) };
    assert!(msg.to_str().unwrap().contains("sums"));

    // null pointers are rejected, not dereferenced
    let st = unsafe { af_ccc(std::ptr::null(), y.as_ptr(), 4, &mut out) };
    assert_eq!(st, AfStatus::AfInvalidArgument);
}

#[test]
fn dataset_evaluate_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let st = unsafe {
        af_gen_synth_dataset(
            c(data_dir.to_str().unwrap()).as_ptr(),
            24,
            AfTask::AfTaskMtl,
            9,
        )
    };
    assert_eq!(st, AfStatus::AfOk);

    // perfect predictions from the labels
    let labels = affectlab::data::read_labels_csv(&data_dir.join("labels.csv")).unwrap();
    let rows: Vec<affectlab::data::PredictionRow> = labels
        .iter()
        .map(|l| affectlab::data::PredictionRow {
            id: l.id.clone(),
            valence: if l.labels.va.is_valid() { l.labels.va.valence } else { 0.0 },
            arousal: if l.labels.va.is_valid() { l.labels.va.arousal } else { 0.0 },
            expression: l.labels.expression.0.max(0),
            au: l.labels.au.values,
        })
        .collect();
    let pred_path = dir.path().join("pred.csv");
    affectlab::data::write_predictions_csv(&pred_path, &rows).unwrap();

    let mut report: *mut AfReport = std::ptr::null_mut();
    let st = unsafe {
        af_evaluate(
            AfTask::AfTaskMtl,
            c(pred_path.to_str().unwrap()).as_ptr(),
            c(data_dir.join("labels.csv").to_str().unwrap()).as_ptr(),
            &mut report,
        )
    };
    assert_eq!(st, AfStatus::AfOk);
    // the ABI must agree exactly with the in-process evaluation
    let expect =
        affectlab::metrics::eval_mtl_files(&pred_path, &data_dir.join("labels.csv")).unwrap();
    let mut score = 0.0;
    unsafe {
        assert_eq!(af_report_score(report, &mut score), AfStatus::AfOk);
    }
    assert_eq!(score, expect.p_score);
    let (mut v, mut a) = (0.0, 0.0);
    unsafe {
        assert_eq!(af_report_ccc(report, &mut v, &mut a), AfStatus::AfOk);
    }
    assert_eq!(v, expect.ccc_v);
    assert!((v - 1.0).abs() < 1e-9);
    let text = unsafe { af_report_text(report) };
    assert!(!text.is_null());
    let text_str = unsafe { CStr::from_ptr(text) }.to_str().unwrap().to_string();
    assert!(text_str.contains("ccc_v=1.000000"), "{text_str}");
    unsafe {
        af_string_free(text);
        af_report_free(report);
    }

    // a missing file maps to an IO error with a readable message
    let mut report2: *mut AfReport = std::ptr::null_mut();
    let st = unsafe {
        af_evaluate(
            AfTask::AfTaskMtl,
            c("/nonexistent/pred.csv").as_ptr(),
            c(data_dir.join("labels.csv").to_str().unwrap()).as_ptr(),
            &mut report2,
        )
    };
    assert_eq!(st, AfStatus::AfIoError);
}

#[test]
fn model_load_and_predict_through_the_abi() {
    // train a minimal expression model, then drive it through the C ABI
    let dir = tempfile::tempdir().unwrap();
    let data = affectlab::data::synth_dataset(12, affectlab::data::Task::Lsd, 5);
    let cfg = affectlab::engine::TrainConfig {
        total_epochs: 1,
        warmup_epochs: 0,
        batch_size: 6,
        accum_iters: 1,
        drop_path: 0.0,
        augment: false,
        lr_scaling: false,
        base_lr: 1e-3,
        mask_ratio: 0.5,
        lambda: 1.0,
        val_fraction: 0.0,
        data_n: 12,
        seed: 2,
        ..affectlab::engine::TrainConfig::cotex_default()
    };
    let run = dir.path().join("run");
    affectlab::engine::train_lsd(&cfg, &data, &run).unwrap();
    let ck = run.join("checkpoints/epoch_000");

    let mut model = std::ptr::null_mut();
    let st = unsafe { af_model_load(c(ck.to_str().unwrap()).as_ptr(), &mut model) };
    assert_eq!(st, AfStatus::AfOk);
    assert_eq!(unsafe { af_model_task(model) }, AfTask::AfTaskLsd);

    let img = &data[0].image;
    let mut pred = AfPrediction {
        valence: 9.0,
        arousal: 9.0,
        expression: -9,
        au: [7; 12],
    };
    let st = unsafe {
        af_model_predict(model, img.data.as_ptr(), img.height, img.width, &mut pred)
    };
    assert_eq!(st, AfStatus::AfOk);
    assert!((0..6).contains(&pred.expression));
    assert_eq!(pred.au, [0; 12]);
    assert_eq!(pred.valence, 0.0);

    // too-small image is rejected
    let tiny = vec![0.0f32; 3 * 64 * 64];
    let st = unsafe { af_model_predict(model, tiny.as_ptr(), 64, 64, &mut pred) };
    assert_eq!(st, AfStatus::AfInvalidArgument);

    unsafe { af_model_free(model) };

    // loading a non-checkpoint fails cleanly
    let mut m2 = std::ptr::null_mut();
    let st = unsafe { af_model_load(c("/nonexistent").as_ptr(), &mut m2) };
    assert_ne!(st, AfStatus::AfOk);
}

#[test]
fn generated_header_exists_and_declares_the_surface() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/affectlab.h");
    let text = std::fs::read_to_string(header).expect("header generated at build time");
    for symbol in [
        "af_version",
        "af_last_error",
        "af_ccc",
        "af_js_divergence",
        "af_gen_synth_dataset",
        "af_evaluate",
        "af_report_score",
        "af_model_load",
        "af_model_predict",
        "AfPrediction",
        "AFFECTLAB_H",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
