use std::collections::BTreeMap;
use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use kdistill::models::{build_backbone, BackboneSpec};
use kdistill::training::{Checkpoint, Role, TrainState, CHECKPOINT_VERSION};
use kdistill_ffi::*;

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = kd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &Path, classes: usize) -> std::path::PathBuf {
    let spec = BackboneSpec::registered("tiny-student", classes).unwrap();
    let model = build_backbone(&spec, 5).unwrap();
    let ckpt = Checkpoint::capture(Role::Student, &model, &BTreeMap::new(), &TrainState::new(0.05), &[], None).unwrap();
    let path = dir.join("m.ckpt");
    ckpt.save(&path).unwrap();
    path
}

#[test]
fn metrics_match_hand_values() {
    let scores = [0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.7, 0.3];
    let labels = [0usize, 1, 0, 1];
    let mut m = KdMetrics::default();
    let st = unsafe { kd_metrics_evaluate(scores.as_ptr(), labels.as_ptr(), 4, 2, &mut m) };
    assert_eq!(st, KdStatus::Ok);
    assert_eq!(m.acc, 0.75);
    assert_eq!(m.bacc, 0.75);
    assert_eq!(m.auc_macro, 0.75);

    let mut json = ptr::null_mut();
    let st = unsafe { kd_metrics_report_json(scores.as_ptr(), labels.as_ptr(), 4, 2, &mut json) };
    assert_eq!(st, KdStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_owned();
    unsafe { kd_string_free(json) };
    assert!(text.contains("\"bacc\""), "{text}");
}

#[test]
fn bad_arguments_report_codes() {
    let mut m = KdMetrics::default();
    let st = unsafe { kd_metrics_evaluate(ptr::null(), [0usize].as_ptr(), 1, 2, &mut m) };
    assert_eq!(st, KdStatus::NullPointer);
    assert!(last_error().contains("scores"));

    let scores = [0.5, 0.5];
    let st = unsafe { kd_metrics_evaluate(scores.as_ptr(), [7usize].as_ptr(), 1, 2, &mut m) };
    assert_eq!(st, KdStatus::InvalidArgument);
    assert!(last_error().contains("label 7"));

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { kd_model_load(missing.as_ptr(), &mut model) }, KdStatus::Io);
    assert!(model.is_null());
    unsafe { kd_model_free(ptr::null_mut()) };
    unsafe { kd_string_free(ptr::null_mut()) };
}

#[test]
fn model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c_path(&saved_model(dir.path(), 3));

    let mut version = 0;
    assert_eq!(unsafe { kd_checkpoint_version(path.as_ptr(), &mut version) }, KdStatus::Ok);
    assert_eq!(version, CHECKPOINT_VERSION);

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { kd_model_load(path.as_ptr(), &mut model) }, KdStatus::Ok);
    let mut info = KdModelInfo::default();
    assert_eq!(unsafe { kd_model_info(model, &mut info) }, KdStatus::Ok);
    assert_eq!(info.classes, 3);

    let (h, w) = (10, 14);
    let pixels: Vec<f32> = (0..2 * 3 * h * w).map(|i| ((i * 31) % 97) as f32 / 97.0).collect();
    let mut probs = vec![0f32; 6];
    let st = unsafe { kd_model_predict(model, pixels.as_ptr(), 2, 3, h, w, probs.as_mut_ptr(), probs.len()) };
    assert_eq!(st, KdStatus::Ok, "{}", last_error());
    for row in probs.chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    let st = unsafe { kd_model_predict(model, pixels.as_ptr(), 2, 3, h, w, probs.as_mut_ptr(), 5) };
    assert_eq!(st, KdStatus::InvalidArgument);

    let mut heat = vec![0f32; h * w];
    let st = unsafe { kd_model_grad_cam(model, pixels.as_ptr(), 3, h, w, 1, heat.as_mut_ptr(), heat.len()) };
    assert_eq!(st, KdStatus::Ok, "{}", last_error());
    assert!(heat.iter().all(|v| (0.0..=1.0).contains(v)));
    let st = unsafe { kd_model_grad_cam(model, pixels.as_ptr(), 3, h, w, 3, heat.as_mut_ptr(), heat.len()) };
    assert_eq!(st, KdStatus::InvalidArgument);
    assert!(last_error().contains("class index 3"));

    unsafe { kd_model_free(model) };
}

#[test]
fn future_checkpoint_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_model(dir.path(), 2);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { kd_model_load(c_path(&path).as_ptr(), &mut model) }, KdStatus::VersionMismatch);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("kdistill.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["kd_model_load", "kd_model_predict", "kd_model_grad_cam", "kd_metrics_evaluate", "KD_STATUS_PANIC"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"kdistill.h\"\n\
         int main(void) {\n\
           KdModel *m = NULL;\n\
           KdMetrics out;\n\
           KdStatus s = kd_model_load(\"x.ckpt\", &m);\n\
           if (s != KD_STATUS_OK) { (void)kd_last_error_message(); }\n\
           double scores[4] = {0.9, 0.1, 0.2, 0.8};\n\
           size_t labels[2] = {0, 1};\n\
           s = kd_metrics_evaluate(scores, labels, 2, 2, &out);\n\
           kd_model_free(m);\n\
           return s == KD_STATUS_OK ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-std=c99", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        return;
    };
    assert!(status.success());
}
