use std::ffi::{CStr, CString};
use std::ptr;

use stcr::augment::intra_video_mixup_with;
use stcr::transform::stt_apply_clip;
use stcr::{BackboneConfig, TrainConfig, TrainState, TransformId, VideoClip};
use stcr_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 512];
    let n = unsafe { stcr_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn ramp_clip(dims: [usize; 4]) -> *mut StcrClip {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|i| (i % 13) as f64 / 16.0).collect();
    let mut clip = ptr::null_mut();
    assert_eq!(unsafe { stcr_clip_new(dims.as_ptr(), data.as_ptr(), &mut clip) }, StcrStatus::Ok);
    clip
}

unsafe fn clip_values(clip: *const StcrClip) -> ([usize; 4], Vec<f64>) {
    let mut dims = [0usize; 4];
    assert_eq!(stcr_clip_dims(clip, dims.as_mut_ptr()), StcrStatus::Ok);
    let n = dims.iter().product();
    (dims, std::slice::from_raw_parts(stcr_clip_data(clip), n).to_vec())
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/stcr.h");
    for name in [
        "stcr_last_error_message",
        "stcr_version",
        "stcr_model_new",
        "stcr_model_load",
        "stcr_model_save",
        "stcr_model_free",
        "stcr_model_num_params",
        "stcr_model_feature_shape",
        "stcr_model_descriptor",
        "stcr_clip_new",
        "stcr_clip_read",
        "stcr_clip_write",
        "stcr_clip_dims",
        "stcr_clip_data",
        "stcr_clip_free",
        "stcr_transform_apply",
        "stcr_transform_compose",
        "stcr_transform_inverse",
        "stcr_intra_mixup",
        "stcr_gradcheck",
        "STCR_STATUS_NULL_POINTER",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn model_matches_core_library() {
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(stcr_model_new(ptr::null(), 4, &mut model), StcrStatus::Ok);
        let train = TrainConfig {
            seed: 4,
            ..TrainConfig::default()
        };
        let params = TrainState::initial(&BackboneConfig::default(), &train).unwrap().params;
        assert_eq!(stcr_model_num_params(model), params.num_params());

        let mut shape = [0usize; 4];
        assert_eq!(stcr_model_feature_shape(model, shape.as_mut_ptr()), StcrStatus::Ok);
        assert_eq!(shape, params.feature_shape());

        let clip = ramp_clip([3, 8, 16, 16]);
        let (dims, values) = clip_values(clip);
        let expected = params.descriptor(&VideoClip::from_vec(dims, values).unwrap()).unwrap();
        let mut out = vec![0.0; shape[0] * shape[1]];
        assert_eq!(stcr_model_descriptor(model, clip, out.as_mut_ptr(), out.len()), StcrStatus::Ok);
        assert_eq!(out, expected.data());

        assert_eq!(
            stcr_model_descriptor(model, clip, out.as_mut_ptr(), out.len() - 1),
            StcrStatus::Dimension
        );
        let large = ramp_clip([3, 8, 20, 20]);
        let (dims, values) = clip_values(large);
        let full = VideoClip::from_vec(dims, values).unwrap();
        let expected = params.descriptor(&full.crop([0, 2, 2], [8, 16, 16]).unwrap()).unwrap();
        assert_eq!(stcr_model_descriptor(model, large, out.as_mut_ptr(), out.len()), StcrStatus::Ok);
        assert_eq!(out, expected.data());
        stcr_clip_free(large);

        let small = ramp_clip([3, 8, 12, 12]);
        assert_eq!(stcr_model_descriptor(model, small, out.as_mut_ptr(), out.len()), StcrStatus::Dimension);

        stcr_clip_free(small);
        stcr_clip_free(clip);
        stcr_model_free(model);
    }
}

#[test]
fn checkpoint_and_clip_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = CString::new(dir.path().join("m.stcr").to_str().unwrap()).unwrap();
    let clip_path = CString::new(dir.path().join("c.vclp").to_str().unwrap()).unwrap();
    let config = CString::new(r#"{"channels": [4], "strides": [[1, 2, 2]]}"#).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(stcr_model_new(config.as_ptr(), 1, &mut model), StcrStatus::Ok);
        assert_eq!(stcr_model_save(model, ckpt.as_ptr()), StcrStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(stcr_model_load(ckpt.as_ptr(), config.as_ptr(), &mut loaded), StcrStatus::Ok);
        assert_eq!(stcr_model_num_params(loaded), stcr_model_num_params(model));
        let mut other = ptr::null_mut();
        assert_eq!(stcr_model_load(ckpt.as_ptr(), ptr::null(), &mut other), StcrStatus::Config);
        assert!(other.is_null());

        let clip = ramp_clip([3, 8, 16, 16]);
        let mut a = vec![0.0; 4 * 8];
        let mut b = vec![0.0; 4 * 8];
        stcr_model_descriptor(model, clip, a.as_mut_ptr(), a.len());
        stcr_model_descriptor(loaded, clip, b.as_mut_ptr(), b.len());
        assert_eq!(a, b);

        assert_eq!(stcr_clip_write(clip, clip_path.as_ptr()), StcrStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(stcr_clip_read(clip_path.as_ptr(), &mut back), StcrStatus::Ok);
        assert_eq!(clip_values(back), clip_values(clip));

        for h in [back, clip] {
            stcr_clip_free(h);
        }
        stcr_model_free(loaded);
        stcr_model_free(model);
    }
}

#[test]
fn transforms_agree_with_core() {
    unsafe {
        let clip = ramp_clip([2, 4, 5, 5]);
        let (dims, values) = clip_values(clip);
        let core_clip = VideoClip::from_vec(dims, values).unwrap();
        for t in TransformId::all() {
            let (f, r) = t.as_pair();
            let mut out = ptr::null_mut();
            assert_eq!(stcr_transform_apply(clip, f, r, &mut out), StcrStatus::Ok);
            assert_eq!(clip_values(out).1, stt_apply_clip(&core_clip, t).unwrap().data());
            stcr_clip_free(out);

            let mut inv = 0u8;
            assert_eq!(stcr_transform_inverse(t.index() as u8, &mut inv), StcrStatus::Ok);
            let mut id = 99u8;
            assert_eq!(stcr_transform_compose(t.index() as u8, inv, &mut id), StcrStatus::Ok);
            assert_eq!(id, 0);
        }

        let mut mixed = ptr::null_mut();
        assert_eq!(stcr_intra_mixup(clip, 0.25, 3, &mut mixed), StcrStatus::Ok);
        assert_eq!(clip_values(mixed).1, intra_video_mixup_with(&core_clip, 0.25, 3).unwrap().data());
        stcr_clip_free(mixed);
        stcr_clip_free(clip);
    }
}

#[test]
fn failures_report_status_and_message() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(stcr_clip_read(ptr::null(), &mut out), StcrStatus::NullPointer);
        assert!(last_error().contains("null"));

        let missing = CString::new("/nonexistent/stcr/clip.vclp").unwrap();
        assert_eq!(stcr_clip_read(missing.as_ptr(), &mut out), StcrStatus::Io);
        assert!(out.is_null());

        let bad = CString::new(r#"{"chanels": [4]}"#).unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(stcr_model_new(bad.as_ptr(), 0, &mut model), StcrStatus::Config);
        assert!(last_error().contains("chanels"));

        let mut idx = 0u8;
        assert_eq!(stcr_transform_compose(16, 0, &mut idx), StcrStatus::InvalidArgument);
        let clip = ramp_clip([1, 2, 3, 3]);
        assert_eq!(stcr_transform_apply(clip, 4, 0, &mut out), StcrStatus::InvalidArgument);
        assert_eq!(stcr_intra_mixup(clip, 0.5, 2, &mut out), StcrStatus::InvalidArgument);
        assert_eq!(stcr_intra_mixup(clip, 0.5, 0, ptr::null_mut()), StcrStatus::NullPointer);
        stcr_clip_free(clip);

        let dims = [1usize, 0, 3, 3];
        let data = [0.0f64];
        assert_ne!(stcr_clip_new(dims.as_ptr(), data.as_ptr(), &mut out), StcrStatus::Ok);

        let mut err = 0.0;
        assert_eq!(stcr_gradcheck(0, 0.0, &mut err), StcrStatus::InvalidArgument);

        assert_eq!(stcr_model_num_params(ptr::null()), 0);
        assert!(stcr_clip_data(ptr::null()).is_null());
        stcr_model_free(ptr::null_mut());
        stcr_clip_free(ptr::null_mut());
        assert!(!CStr::from_ptr(stcr_version()).to_bytes().is_empty());
    }
}

#[test]
fn error_message_truncates_to_buffer() {
    unsafe {
        let mut idx = 0u8;
        stcr_transform_inverse(200, &mut idx);
        let mut small = [1 as std::ffi::c_char; 8];
        let full = stcr_last_error_message(small.as_mut_ptr(), small.len());
        assert!(full > 7);
        assert_eq!(small[7], 0);
        assert_eq!(CStr::from_ptr(small.as_ptr()).to_bytes().len(), 7);
    }
}
