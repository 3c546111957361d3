use std::path::Path;
use std::process::{Command, Output};

use gcame_core::capture::{capture_toy, write_capture, GroundTruth};
use gcame_core::detector::fixtures::one_square;
use gcame_core::{build_blob_detector, DetectorConfig};
use serde_json::Value;

fn gcame(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcame"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&o.stdout))
    })
}

fn without_timing(mut v: Value) -> Value {
    if let Some(m) = v.as_object_mut() {
        m.remove("timingMs");
    }
    v
}

fn toy_capture(dir: &Path, with_gt: bool) {
    let det = build_blob_detector(&DetectorConfig::default()).unwrap();
    let scene = one_square(det.config()).unwrap();
    let gt = with_gt.then(|| {
        vec![GroundTruth {
            bbox: scene.objects[0].bbox,
            class_id: 0,
        }]
    });
    let c = capture_toy(&det, &scene.image, &["cls0".into()], gt, |d| (!d.is_empty()).then_some(0)).unwrap();
    write_capture(&c, dir).unwrap();
}

#[test]
fn selftest_passes_and_lists_checks() {
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["selftest", "--json"], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().len() >= 6);
    assert!(out.path().join("selftest.json").is_file());
}

#[test]
fn selftest_negative_control_fails() {
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["selftest", "--json", "--corrupt-weights"], out.path());
    assert_eq!(code(&o), 1);
    let v = stdout_json(&o);
    let grad = v["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "gradient_oracle")
        .unwrap();
    assert_eq!(grad["passed"], false);
}

#[test]
fn explain_toy_writes_outputs_and_hits() {
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["explain", "--toy", "one-square", "--json"], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["pointingGame"], true);
    assert!(v["timingMs"].as_f64().unwrap() > 0.0);
    assert_eq!(v["layersUsed"][0], "cls0");
    for f in ["saliency.npy", "heatmap.png", "summary.json"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    let sal = gcame_core::capture::npy::read(&out.path().join("saliency.npy")).unwrap();
    assert_eq!(sal.shape(), &[64, 64]);
}

#[test]
fn explain_is_deterministic_apart_from_timing() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["explain", "--toy", "two-squares", "--json", "--mode", "two_stage"];
    let x = gcame(&args, a.path());
    let y = gcame(&args, b.path());
    assert_eq!(code(&x), 0);
    assert_eq!(without_timing(stdout_json(&x)), without_timing(stdout_json(&y)));
    for f in ["saliency.npy", "heatmap.png"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
}

#[test]
fn explain_input_errors_exit_2() {
    let out = tempfile::tempdir().unwrap();
    let missing = out.path().join("nope");
    let o = gcame(&["explain", "--capture", missing.to_str().unwrap()], out.path());
    assert_eq!(code(&o), 2);
    assert_eq!(code(&gcame(&["explain"], out.path())), 2);
    assert_eq!(code(&gcame(&["explain", "--toy", "circle"], out.path())), 2);
    assert_eq!(code(&gcame(&["explain", "--toy", "one-square", "--mode", "three"], out.path())), 2);
    assert_eq!(code(&gcame(&["explain", "--toy", "one-square", "--layers", "zzz"], out.path())), 2);
}

#[test]
fn no_signal_is_a_warning_unless_strict() {
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["explain", "--toy", "blank", "--json"], out.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_json(&o)["noSignal"], true);
    assert_eq!(code(&gcame(&["explain", "--toy", "blank", "--strict"], out.path())), 3);
}

#[test]
fn explain_from_capture_matches_toy() {
    let cap = tempfile::tempdir().unwrap();
    toy_capture(cap.path(), true);
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["explain", "--capture", cap.path().to_str().unwrap(), "--json"], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["pointingGame"], true);
    assert_eq!(v["layersUsed"][0], "cls0");
}

#[test]
fn evaluate_pair_suite() {
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["evaluate", "--toy", "pairs", "--count", "8", "--seed", "3", "--json"], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["pg"], 1.0);
    assert_eq!(v["n"].as_u64().unwrap() + v["skipped"].as_u64().unwrap(), 16);
    assert!(v["averageDropPercent"].as_f64().unwrap() > 0.0);
    assert!(v["pgTiny"].is_null());
    assert!(out.path().join("metrics.json").is_file());
}

#[test]
fn evaluate_captures() {
    let root = tempfile::tempdir().unwrap();
    toy_capture(&root.path().join("a"), true);
    toy_capture(&root.path().join("b"), true);
    let out = tempfile::tempdir().unwrap();
    let o = gcame(&["evaluate", "--capture", root.path().to_str().unwrap(), "--json"], out.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["n"], 2);
    assert_eq!(v["pg"], 1.0);
    // No model to rerun on the bokeh image, and no sidecar file.
    assert!(v["averageDropPercent"].is_null());
    assert!(v["informationDropPercent"].is_number());
}

#[test]
fn evaluate_empty_dataset_exits_2() {
    let root = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert_eq!(code(&gcame(&["evaluate", "--capture", root.path().to_str().unwrap()], out.path())), 2);
    let cap = tempfile::tempdir().unwrap();
    toy_capture(cap.path(), false);
    assert_eq!(code(&gcame(&["evaluate", "--capture", cap.path().to_str().unwrap()], out.path())), 2);
    assert_eq!(code(&gcame(&["evaluate", "--toy", "blank"], out.path())), 2);
}

#[test]
fn sanity_grid_and_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x = gcame(&["sanity", "--toy", "one-square", "--seed", "4", "--json"], a.path());
    let y = gcame(&["sanity", "--toy", "one-square", "--seed", "4", "--json"], b.path());
    assert_eq!(code(&x), 0, "{}", String::from_utf8_lossy(&x.stderr));
    assert_eq!(x.stdout, y.stdout);
    let v = stdout_json(&x);
    assert_eq!(v["entries"].as_array().unwrap().len(), 10);
    let npys = std::fs::read_dir(a.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "npy"))
        .count();
    assert_eq!(npys, 11);
    assert!(a.path().join("sanity_grid.png").is_file());
}

#[test]
fn sanity_rejects_captures() {
    let cap = tempfile::tempdir().unwrap();
    toy_capture(cap.path(), true);
    let out = tempfile::tempdir().unwrap();
    assert_eq!(code(&gcame(&["sanity", "--capture", cap.path().to_str().unwrap()], out.path())), 2);
}
