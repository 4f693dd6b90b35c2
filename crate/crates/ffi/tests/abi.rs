use std::ffi::{CStr, CString};
use std::ptr;

use segadapt::data::{synth_dataset, Normalization, ShiftSpec, SynthParams, SYNTH_CLASS_NAMES};
use segadapt::network::VoteMode;
use segadapt::train::{Checkpoint, ModelSegmenter, Segmenter, TrainConfig, TrainState};
use segadapt_ffi::*;

fn last_error() -> String {
    let p = segadapt_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(segadapt_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn tile_count_matches_closed_form() {
    let mut n = 0usize;
    assert_eq!(segadapt_tile_count(6000, 6000, 512, 512, &mut n), SegadaptStatus::Ok);
    assert_eq!(n, 121);
    assert!(segadapt_last_error().is_null());
    assert_eq!(segadapt_tile_count(10, 10, 4, 0, &mut n), SegadaptStatus::InvalidArgument);
    assert!(last_error().contains("stride"));
    assert_eq!(
        segadapt_tile_count(10, 10, 4, 2, ptr::null_mut()),
        SegadaptStatus::NullPointer
    );
}

#[test]
fn tile_grid_fills_buffers_and_reports_short_ones() {
    let mut rows = [0usize; 9];
    let mut cols = [0usize; 9];
    let mut n = 0usize;
    let st = segadapt_tile_grid(10, 10, 4, 3, rows.as_mut_ptr(), cols.as_mut_ptr(), 9, &mut n);
    assert_eq!(st, SegadaptStatus::Ok);
    assert_eq!(n, 9);
    assert_eq!(rows, [0, 0, 0, 3, 3, 3, 6, 6, 6]);
    assert_eq!(cols, [0, 3, 6, 0, 3, 6, 0, 3, 6]);

    let st = segadapt_tile_grid(10, 10, 4, 3, rows.as_mut_ptr(), cols.as_mut_ptr(), 4, &mut n);
    assert_eq!(st, SegadaptStatus::InvalidArgument);
    assert_eq!(n, 9);
}

#[test]
fn confusion_scores_match_hand_counts() {
    let mut cm = ptr::null_mut();
    unsafe {
        assert_eq!(segadapt_confusion_new(3, &mut cm), SegadaptStatus::Ok);
        let pred = [0u32, 0, 1, 1, 2, 0];
        let truth = [0u32, 1, 1, 1, 255, 0];
        let st = segadapt_confusion_accumulate(cm, pred.as_ptr(), truth.as_ptr(), 6, 255);
        assert_eq!(st, SegadaptStatus::Ok);

        // class 0: tp 2, fp 1, fn 0; class 1: tp 2, fp 0, fn 1
        let mut v = 0.0;
        assert_eq!(segadapt_confusion_iou(cm, 0, &mut v), SegadaptStatus::Ok);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(segadapt_confusion_f1(cm, 1, &mut v), SegadaptStatus::Ok);
        assert!((v - 0.8).abs() < 1e-12);
        assert_eq!(segadapt_confusion_iou(cm, 2, &mut v), SegadaptStatus::Undefined);
        assert_eq!(segadapt_confusion_iou(cm, 3, &mut v), SegadaptStatus::InvalidArgument);
        assert_eq!(segadapt_confusion_miou(cm, &mut v), SegadaptStatus::Ok);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);

        let bad = [7u32];
        let st = segadapt_confusion_accumulate(cm, bad.as_ptr(), truth.as_ptr(), 1, 255);
        assert_eq!(st, SegadaptStatus::InvalidArgument);
        segadapt_confusion_free(cm);
        segadapt_confusion_free(ptr::null_mut());
    }
}

#[test]
fn model_load_reports_missing_and_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(segadapt_model_load(missing.as_ptr(), &mut model), SegadaptStatus::Io);
        assert!(model.is_null());
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(segadapt_model_load(junk.as_ptr(), &mut model), SegadaptStatus::Checkpoint);
        assert_eq!(segadapt_model_load(ptr::null(), &mut model), SegadaptStatus::NullPointer);
    }
}

#[test]
fn model_predict_matches_library_inference() {
    let config = TrainConfig {
        num_classes: 6,
        seed: 3,
        ..TrainConfig::default()
    };
    let state = TrainState::new(config.clone()).unwrap();
    let names: Vec<String> = SYNTH_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let norm = Normalization::default();
    let ckpt = state.to_checkpoint(names, norm).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();

    let params = SynthParams {
        tile_size: 32,
        patch_size: 32,
        stride: 32,
        ..SynthParams::default()
    };
    let (source, _) = synth_dataset(1, 1, ShiftSpec::identity(), &params).unwrap();
    let images = source.images(&[0], config.dtype()).unwrap();
    let labels = source.labels(&[0]).unwrap();
    let expected = ModelSegmenter {
        ensemble: &state.ensemble,
        method: config.method,
        vote: VoteMode::Probabilities,
    }
    .segment(&images, &labels)
    .unwrap()
    .flatten_all()
    .unwrap()
    .to_vec1::<u32>()
    .unwrap();

    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(segadapt_model_load(c_path.as_ptr(), &mut model), SegadaptStatus::Ok);
        let mut k = 0usize;
        assert_eq!(segadapt_model_num_classes(model, &mut k), SegadaptStatus::Ok);
        assert_eq!(k, 6);
        let mut m = 0usize;
        assert_eq!(segadapt_model_size_multiple(model, &mut m), SegadaptStatus::Ok);
        assert_eq!(m, config.downsample);

        let pixels = &source.patches[0].pixels;
        let mut out = vec![0u32; 32 * 32];
        let st = segadapt_model_predict(model, pixels.as_ptr(), 32, 32, out.as_mut_ptr());
        assert_eq!(st, SegadaptStatus::Ok, "{}", last_error());
        assert_eq!(out, expected);

        let st = segadapt_model_predict(model, pixels.as_ptr(), 31, 33, out.as_mut_ptr());
        assert_eq!(st, SegadaptStatus::InvalidArgument);
        segadapt_model_free(model);
    }
}

#[test]
fn label_echo_checkpoint_loads_but_cannot_predict() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("echo.ckpt");
    Checkpoint::label_echo(vec!["a".into(), "b".into()]).save(&path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(segadapt_model_load(c_path.as_ptr(), &mut model), SegadaptStatus::Ok);
        let mut k = 0usize;
        segadapt_model_num_classes(model, &mut k);
        assert_eq!(k, 2);
        let pixels = [0u8; 12];
        let mut out = [0u32; 4];
        let st = segadapt_model_predict(model, pixels.as_ptr(), 2, 2, out.as_mut_ptr());
        assert_eq!(st, SegadaptStatus::InvalidArgument);
        segadapt_model_free(model);
    }
}
