//! Built-in checks run by `gcame selftest`: the gradient oracle plus a set of
//! exact invariants on the toy detector, each reported by name.

use serde::Serialize;

use crate::capture::{capture_toy, read_capture, write_capture};
use crate::detector::fixtures::{one_square, two_squares};
use crate::detector::{build_blob_detector, Detector, DetectorConfig, ScoreTarget, ToySource};
use crate::error::{Error, Result};
use crate::gcame::{compute_sigma, explain, gaussian_mask, GcameOptions};
use crate::metrics::{average_drop, ebpg, iou, pointing_game, BoundingBox, DropRecord};
use crate::numerics::Tensor;
use crate::sanity::{pearson, randomize, restore_layer, RandomizationMode, RandomizationPlan};

pub const FD_EPS: f32 = 1e-3;
pub const FD_TOLERANCE: f32 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Negative control: the analytic gradient is taken on a detector whose
    /// class predictor has been tampered with, so it no longer matches the
    /// model the finite differences probe.
    pub corrupt_weights: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

type Check = fn(&Detector, &SelftestOptions) -> Result<(bool, String)>;

const CHECKS: [(&str, Check); 8] = [
    ("gradient_oracle", gradient_oracle),
    ("one_pixel_support", one_pixel_support),
    ("gaussian_mask", gaussian_analytics),
    ("sigma_worked_example", sigma_worked_example),
    ("metrics_oracles", metrics_oracles),
    ("two_square_localization", localization),
    ("sanity_noop_plan", sanity_noop),
    ("capture_round_trip", capture_round_trip),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

pub fn run(options: &SelftestOptions) -> SelftestReport {
    let det = match build_blob_detector(&DetectorConfig::default()) {
        Ok(d) => d,
        Err(e) => {
            return SelftestReport {
                passed: false,
                checks: vec![CheckResult {
                    name: "build_detector",
                    passed: false,
                    detail: e.to_string(),
                }],
            }
        }
    };
    let checks: Vec<CheckResult> = CHECKS
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = check(&det, options).unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckResult {
                name,
                passed,
                detail,
            }
        })
        .collect();
    SelftestReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

pub fn max_relative_error(exact: &Tensor, approx: &Tensor) -> f32 {
    exact
        .data()
        .iter()
        .zip(approx.data())
        .map(|(x, y)| (x - y).abs() / (x.abs() + 1e-6))
        .fold(0.0, f32::max)
}

fn tampered(det: &Detector) -> Result<Detector> {
    let mut out = det.clone();
    let layer = out
        .weights_mut()
        .get_mut("cls_pred0")
        .ok_or_else(|| Error::UnknownLayer("cls_pred0".into()))?;
    for v in layer.weight.data_mut() {
        *v *= 1.5;
    }
    Ok(out)
}

fn gradient_oracle(det: &Detector, opts: &SelftestOptions) -> Result<(bool, String)> {
    let scene = one_square(det.config())?;
    let (dets, cache) = det.forward(&scene.image)?;
    let d = dets
        .first()
        .ok_or_else(|| Error::InvalidInput("one-square fixture produced no detection".into()))?;
    let analytic_det = if opts.corrupt_weights { tampered(det)? } else { det.clone() };
    let exact = analytic_det.backward_class_score(&cache, d, "cls0")?;
    let fd = det.finite_diff_gradient(&scene.image, d, "cls0", FD_EPS)?;
    let err = max_relative_error(&exact.values, &fd.values);
    Ok((err < FD_TOLERANCE, format!("max relative error {err:.3e} at eps {FD_EPS}")))
}

fn one_pixel_support(det: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let scene = one_square(det.config())?;
    let (dets, cache) = det.forward(&scene.image)?;
    let d = dets
        .first()
        .ok_or_else(|| Error::InvalidInput("no detection".into()))?;
    let src = d.source.ok_or_else(|| Error::InvalidInput("detection has no source cell".into()))?;
    let g = det.backward_class_score(&cache, d, "cls0")?;
    let (k, h, w) = g.values.dims3()?;
    let mut bad = 0;
    for kk in 0..k {
        for p in 0..h * w {
            let (i, j) = (p / w, p % w);
            if g.values.at3(kk, i, j) != 0.0 && (i, j) != (src.cell_row, src.cell_col) {
                bad += 1;
            }
        }
    }
    Ok((bad == 0, format!("{bad} nonzero cells off ({}, {})", src.cell_row, src.cell_col)))
}

fn gaussian_analytics(_: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let sigma = 1.7;
    let m = gaussian_mask(9, 9, (4, 4), sigma)?;
    let v = |i: usize, j: usize| m.values.at2(i, j) as f64;
    let axial = (-1.0 / (2.0 * sigma * sigma)).exp();
    let mut asym = 0.0f64;
    for i in 0..9 {
        for j in 0..9 {
            asym = asym
                .max((v(i, j) - v(8 - i, j)).abs())
                .max((v(i, j) - v(i, 8 - j)).abs());
        }
    }
    let ok = v(4, 4) == 1.0 && (v(4, 5) - axial).abs() < 1e-6 && asym < 1e-6;
    Ok((ok, format!("peak {}, axial error {:.1e}, asymmetry {asym:.1e}", v(4, 4), (v(4, 5) - axial).abs())))
}

fn sigma_worked_example(_: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let g = Tensor::filled(vec![8, 8], std::f32::consts::E);
    let s = compute_sigma(&g, 64, 64)?;
    let target = 8f64.ln();
    Ok(((s - target).abs() < 1e-4, format!("sigma {s:.6}, expected {target:.6}")))
}

fn metrics_oracles(_: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let ad = average_drop(&[
        DropRecord { original: 0.8, perturbed: 0.6 },
        DropRecord { original: 0.5, perturbed: 0.5 },
        DropRecord { original: 0.4, perturbed: 0.0 },
    ])?;
    let half = iou(
        &BoundingBox::new(0.0, 0.0, 2.0, 2.0),
        &BoundingBox::new(1.0, 0.0, 3.0, 2.0),
    );
    let ok = (ad - 125.0 / 3.0).abs() < 1e-6 && (half - 1.0 / 3.0).abs() < 1e-6;
    Ok((ok, format!("average drop {ad:.6}%, iou {half:.6}")))
}

fn localization(det: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let scene = two_squares(det.config())?;
    let (dets, cache) = det.forward(&scene.image)?;
    let layers = vec![det.class_head_input(0)];
    let mut hits = 0;
    let mut detail = Vec::new();
    for obj in &scene.objects {
        let Some(d) = crate::detector::fixtures::match_detection(&dets, &obj.bbox) else {
            detail.push("missed".to_string());
            continue;
        };
        let s = explain(&ToySource::new(det, &cache, ScoreTarget::of(d)?), &layers, &GcameOptions::default())?;
        let others: f64 = scene
            .objects
            .iter()
            .filter(|o| o.bbox != obj.bbox)
            .map(|o| ebpg(&s, &o.bbox))
            .sum();
        let own = ebpg(&s, &obj.bbox);
        if pointing_game(&s, &obj.bbox, false) && own > others {
            hits += 1;
        }
        detail.push(format!("ebpg {own:.3} vs {others:.3}"));
    }
    Ok((hits == scene.objects.len(), detail.join(", ")))
}

fn sanity_noop(det: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let scene = one_square(det.config())?;
    let (dets, _) = det.forward(&scene.image)?;
    let target = ScoreTarget::of(dets.first().ok_or_else(|| Error::InvalidInput("no detection".into()))?)?;
    let plan = RandomizationPlan::new(RandomizationMode::Independent, "cls0", 0);
    let restored = restore_layer(&randomize(det, &plan)?, det, "cls0")?;
    let layers = vec!["cls0".to_string()];
    let opts = GcameOptions::default();
    let a = crate::sanity::explain_cell(det, &scene.image, target, &layers, &opts)?;
    let b = crate::sanity::explain_cell(&restored, &scene.image, target, &layers, &opts)?;
    let r = pearson(&a.values, &b.values);
    let shown = r.map_or("undefined".to_string(), |v| format!("{v}"));
    Ok((r == Some(1.0), format!("correlation {shown}")))
}

fn capture_round_trip(det: &Detector, _: &SelftestOptions) -> Result<(bool, String)> {
    let scene = one_square(det.config())?;
    let layers = vec!["cls0".to_string(), "neck0".to_string()];
    let c = capture_toy(det, &scene.image, &layers, None, |d| (!d.is_empty()).then_some(0))?;
    let dir = tempfile::tempdir()?;
    write_capture(&c, dir.path())?;
    let back = read_capture(dir.path())?;
    Ok((back == c, format!("{} layers", c.layers.len())))
}
