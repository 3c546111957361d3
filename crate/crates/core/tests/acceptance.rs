//! Acceptance suite. Runs every criterion in sequence so the timing checks
//! are not disturbed by other tests, prints one PASS/FAIL line per criterion
//! and fails at the end if any criterion failed.

use std::time::{Duration, Instant};

use gcame_core::capture::{
    read_capture, write_capture, Capture, CaptureManifest, GroundTruth, LayerArrays, WebpCodec,
    layer_entry, CAPTURE_VERSION,
};
use gcame_core::detector::fixtures::{
    match_detection, one_square, pair_suite, textured_one_square, Scene,
};
use gcame_core::detector::{LevelConfig, SourceCell};
use gcame_core::gcame::{combine_saliency, compute_sigma, gaussian_mask};
use gcame_core::metrics::{
    average_drop, ebpg, information_drop, iou, perturb_image, pointing_game, DropRecord, MeanFill,
};
use gcame_core::sanity::{
    pearson, randomize, restore_layer, sanity_report, RandomizationMode, RandomizationPlan,
};
use gcame_core::selftest::max_relative_error;
use gcame_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn default_detector() -> Detector {
    build_blob_detector(&DetectorConfig::default()).unwrap()
}

fn head_layers(det: &Detector) -> Vec<String> {
    (0..det.config().levels.len()).map(|l| det.class_head_input(l)).collect()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let det = default_detector();
    let scene = one_square(det.config()).unwrap();
    let (dets, cache) = det.forward(&scene.image).unwrap();
    let d = &dets[0];
    let exact = det.backward_class_score(&cache, d, "cls0").unwrap();
    let fd = det.finite_diff_gradient(&scene.image, d, "cls0", 1e-3).unwrap();
    let err = max_relative_error(&exact.values, &fd.values);
    let took = start.elapsed();
    outcome(
        err < 1e-3 && took < Duration::from_secs(10),
        format!("max relative error {err:.2e} (< 1e-3), {took:.2?} (< 10 s)"),
    )
}

fn random_config(rng: &mut ChaCha8Rng) -> DetectorConfig {
    let stride = [4, 8][rng.random_range(0..2)];
    let (gh, gw) = (rng.random_range(6..=10), rng.random_range(6..=10));
    let classes = rng.random_range(1..=3);
    let mut cfg = DetectorConfig::single_level(
        gh * stride * 2,
        gw * stride * 2,
        stride,
        rng.random_range(classes..=32),
        classes,
    );
    if rng.random_bool(0.3) {
        cfg.levels.push(LevelConfig {
            stride: 2 * stride,
            channels: rng.random_range(classes..=16),
        });
    }
    cfg
}

fn one_pixel_support() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(604);
    let mut good = 0;
    let mut failures = Vec::new();
    for case in 0..100 {
        let cfg = random_config(&mut rng);
        let det = build_blob_detector(&cfg).unwrap();
        let side = det.object_side(0);
        let mut scene = Scene::blank(cfg.input_h, cfg.input_w).unwrap();
        let top = rng.random_range(0..=cfg.input_h - side);
        let left = rng.random_range(0..=cfg.input_w - side);
        scene
            .add_square(top, left, side, rng.random_range(0..cfg.num_classes))
            .unwrap();
        let (dets, cache) = det.forward(&scene.image).unwrap();
        let mut ok = !dets.is_empty();
        for d in &dets {
            let src = d.source.unwrap();
            for layer in head_layers(&det) {
                let g = det.backward_class_score(&cache, d, &layer).unwrap();
                let (k, h, w) = g.values.dims3().unwrap();
                let own_level = layer == det.class_head_input(src.level_index);
                for kk in 0..k {
                    let nz: Vec<(usize, usize)> = (0..h * w)
                        .filter(|&p| g.values.at3(kk, p / w, p % w) != 0.0)
                        .map(|p| (p / w, p % w))
                        .collect();
                    let at_source = nz.iter().all(|&c| own_level && c == (src.cell_row, src.cell_col));
                    ok &= nz.len() <= 1 && at_source;
                }
            }
        }
        if ok {
            good += 1;
        } else {
            failures.push(case);
        }
    }
    outcome(good == 100, format!("{good}/100 configs, failures {failures:?}"))
}

fn mask_analytics() -> Outcome {
    let mut worst_axial = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut centers_exact = true;
    for &sigma in &[0.5, 1.0, 2.0794, 3.3] {
        for n in [5usize, 8, 9] {
            let c = n / 2;
            // Symmetry needs room on both sides, so use an odd grid around c.
            let size = 2 * c + 1;
            let m = gaussian_mask(size, size, (c, c), sigma).unwrap();
            let v = |i: usize, j: usize| m.values.at2(i, j) as f64;
            centers_exact &= m.values.at2(c, c) == 1.0;
            let axial = (-1.0 / (2.0 * sigma * sigma)).exp();
            for (i, j) in [(c, c + 1), (c, c - 1), (c + 1, c), (c - 1, c)] {
                worst_axial = worst_axial.max((v(i, j) - axial).abs());
            }
            for i in 0..size {
                for j in 0..size {
                    for (a, b) in [(size - 1 - i, j), (i, size - 1 - j), (size - 1 - i, size - 1 - j)] {
                        worst_sym = worst_sym.max((v(i, j) - v(a, b)).abs());
                    }
                }
            }
        }
    }
    outcome(
        centers_exact && worst_axial < 1e-6 && worst_sym < 1e-6,
        format!("center exactly 1: {centers_exact}, axial error {worst_axial:.1e}, symmetry error {worst_sym:.1e}"),
    )
}

fn sigma_formula() -> Outcome {
    let g = Tensor::filled(vec![8, 8], std::f32::consts::E);
    let s = compute_sigma(&g, 64, 64).unwrap();
    let want = 8f64.ln();
    outcome((s - want).abs() < 1e-4, format!("sigma {s:.6} vs ln 8 = {want:.6}"))
}

fn localization() -> Outcome {
    let det = default_detector();
    let layers = head_layers(&det);
    let suite = pair_suite(det.config(), 50, 2024).unwrap();
    let (mut hits, mut missing) = (0, 0);
    let (mut target, mut distractor) = (0.0, 0.0);
    for scene in &suite {
        let (a, b) = (scene.objects[0], scene.objects[1]);
        let (dets, cache) = det.forward(&scene.image).unwrap();
        let Some(d) = match_detection(&dets, &a.bbox) else {
            missing += 1;
            continue;
        };
        let s = explain(&ToySource::new(&det, &cache, ScoreTarget::of(d).unwrap()), &layers, &GcameOptions::default())
            .unwrap();
        hits += pointing_game(&s, &a.bbox, false) as usize;
        target += ebpg(&s, &a.bbox);
        distractor += ebpg(&s, &b.bbox);
    }
    let n = suite.len() as f64;
    let pg = hits as f64 / n;
    let (t, d) = (target / n, distractor / n);
    outcome(
        pg == 1.0 && missing == 0 && t >= 2.0 * d,
        format!("PG {pg:.2} ({missing} undetected), mean EBPG target {t:.3} vs distractor {d:.3}"),
    )
}

fn metrics_oracles() -> Outcome {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    let a = BoundingBox::new(0.0, 0.0, 2.0, 2.0);
    check("iou identical", close(iou(&a, &a), 1.0));
    check("iou disjoint", close(iou(&a, &BoundingBox::new(5.0, 5.0, 6.0, 6.0)), 0.0));
    check("iou third", close(iou(&a, &BoundingBox::new(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0));

    // 4×5 map: inside mass 8 in the left 2×2 block, outside mass 2.
    let mut v = Tensor::zeros(vec![4, 5]);
    for (i, j, x) in [(0, 0, 2.0), (0, 1, 2.0), (1, 0, 3.0), (1, 1, 1.0), (3, 4, 1.5), (2, 3, 0.5)] {
        v.data_mut()[i * 5 + j] = x;
    }
    let sal = SaliencyMap {
        values: v,
        target: None,
        layers: vec![],
        no_signal: false,
    };
    check("ebpg 0.8", close(ebpg(&sal, &a), 0.8));
    check("pg hit", pointing_game(&sal, &a, false));
    check("pg miss", !pointing_game(&sal, &BoundingBox::new(3.0, 2.0, 5.0, 4.0), false));
    let mut tie = sal.clone();
    tie.values.data_mut()[19] = 3.0;
    check("pg multi-max miss", !pointing_game(&tie, &a, true));
    check("pg first-max hit", pointing_game(&tie, &a, false));

    // 10×10 perturbation: exactly 20 pixels change, a full-weight pixel becomes μ.
    let mut img = ImageRgb::filled(10, 10, [0.2, 0.4, 0.6]).unwrap();
    img.set_pixel(0, 0, [1.0, 1.0, 1.0]);
    let ramp = SaliencyMap {
        values: Tensor::new(vec![10, 10], (0..100).map(|i| i as f32 / 99.0).collect()).unwrap(),
        target: None,
        layers: vec![],
        no_signal: false,
    };
    let p = perturb_image(&img, &ramp, 0.2, MeanFill::Global).unwrap();
    let changed = (0..100)
        .filter(|&i| img.pixel(i / 10, i % 10) != p.pixel(i / 10, i % 10))
        .count();
    check("perturb count", changed == 20);
    let mu = img.mean() as f32;
    check("perturb mu", p.pixel(9, 9).iter().all(|&c| (c - mu).abs() < 1e-6));
    let blank = SaliencyMap::zeros(10, 10);
    check("perturb identity", perturb_image(&img, &blank, 0.2, MeanFill::Global).unwrap() == img);

    let ad = average_drop(&[
        DropRecord { original: 0.8, perturbed: 0.6 },
        DropRecord { original: 0.5, perturbed: 0.5 },
        DropRecord { original: 0.4, perturbed: 0.0 },
    ])
    .unwrap();
    check("average drop", close(ad, 125.0 / 3.0));
    check(
        "average drop single",
        close(average_drop(&[DropRecord { original: 0.8, perturbed: 0.6 }]).unwrap(), 25.0),
    );
    let n = 13;
    outcome(
        fails.is_empty(),
        format!("{}/{n} fixtures, average drop {ad:.9}%, failed {fails:?}", n - fails.len()),
    )
}

fn bokeh_drop(det: &Detector, seed: u64) -> f64 {
    let scene = textured_one_square(det.config(), 0.4, 0.02, seed).unwrap();
    let (dets, cache) = det.forward(&scene.image).unwrap();
    let s = explain(
        &ToySource::new(det, &cache, ScoreTarget::of(&dets[0]).unwrap()),
        &head_layers(det),
        &GcameOptions::default(),
    )
    .unwrap();
    let bokeh = perturb_image(&scene.image, &s, 0.2, MeanFill::Global).unwrap();
    information_drop(&scene.image, &bokeh, &WebpCodec::default())
        .unwrap()
        .percent
}

fn info_drop() -> Outcome {
    let det = default_detector();
    let scene = textured_one_square(det.config(), 0.4, 0.02, 1).unwrap();
    let (dets, cache) = det.forward(&scene.image).unwrap();
    let s = explain(
        &ToySource::new(&det, &cache, ScoreTarget::of(&dets[0]).unwrap()),
        &head_layers(&det),
        &GcameOptions::default(),
    )
    .unwrap();
    let bokeh = perturb_image(&scene.image, &s, 0.2, MeanFill::Global).unwrap();
    let info = information_drop(&scene.image, &bokeh, &WebpCodec::default()).unwrap();
    let spread: Vec<String> = (0..10).map(|seed| format!("{:.1}", bokeh_drop(&det, seed))).collect();
    outcome(
        info.ratio < 1.0 && info.percent > 0.0,
        format!(
            "ratio {:.4} ({} -> {} bytes), drop {:.2}%; seeds 0-9: [{}]%",
            info.ratio,
            info.original_bytes,
            info.bokeh_bytes,
            info.percent,
            spread.join(", ")
        ),
    )
}

fn sanity() -> Outcome {
    let det = default_detector();
    let scene = one_square(det.config()).unwrap();
    let (dets, _) = det.forward(&scene.image).unwrap();
    let target = ScoreTarget::of(&dets[0]).unwrap();
    let layers = head_layers(&det);
    let opts = GcameOptions::default();
    let cascade = |layer: &str| {
        let plans: Vec<_> = (0..5)
            .map(|s| RandomizationPlan::new(RandomizationMode::Cascading, layer, s))
            .collect();
        sanity_report(&det, &scene.image, target, &plans, &layers, &opts)
            .unwrap()
            .mean_pearson()
            .unwrap()
    };
    let gated = cascade("cls0");
    let context: Vec<String> = ["neck0", "pool0", "color"]
        .iter()
        .map(|l| format!("{l} {:.3}", cascade(l)))
        .collect();

    let plan = RandomizationPlan::new(RandomizationMode::Independent, "cls0", 11);
    let restored = restore_layer(&randomize(&det, &plan).unwrap(), &det, "cls0").unwrap();
    let a = gcame_core::sanity::explain_cell(&det, &scene.image, target, &layers, &opts).unwrap();
    let b = gcame_core::sanity::explain_cell(&restored, &scene.image, target, &layers, &opts).unwrap();
    let noop = pearson(&a.values, &b.values);
    outcome(
        gated < 0.5 && noop == Some(1.0),
        format!(
            "cascading from cls0 over 5 seeds: mean r {gated:.3}; no-op r {noop:?}; deeper cascades (context): {}",
            context.join(", ")
        ),
    )
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn time_explain(det: &Detector, scene: &Scene, reps: usize) -> Duration {
    let layers = head_layers(det);
    let opts = GcameOptions::default();
    let runs = (0..reps)
        .map(|_| {
            let t = Instant::now();
            let (dets, cache) = det.forward(&scene.image).unwrap();
            let s = explain(&ToySource::new(det, &cache, ScoreTarget::of(&dets[0]).unwrap()), &layers, &opts)
                .unwrap();
            std::hint::black_box(s);
            t.elapsed()
        })
        .collect();
    median(runs)
}

fn performance() -> Outcome {
    let det = default_detector();
    let scene = one_square(det.config()).unwrap();
    let single = time_explain(&det, &scene, 15);

    // Scaling is measured on the saliency stage alone, given the captured maps.
    let ks = [16usize, 32, 64, 128, 256];
    let times: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let d = build_blob_detector(&DetectorConfig::single_level(64, 64, 8, k, 3)).unwrap();
            let (dets, cache) = d.forward(&scene.image).unwrap();
            let src = ToySource::new(&d, &cache, ScoreTarget::of(&dets[0]).unwrap());
            let (a, g) = src.layer_maps("cls0").unwrap();
            let opts = GcameOptions::default();
            let runs = (0..15)
                .map(|_| {
                    let t = Instant::now();
                    std::hint::black_box(combine_saliency(&a, &g, 64, 64, &opts).unwrap());
                    t.elapsed()
                })
                .collect();
            median(runs).as_secs_f64()
        })
        .collect();
    let n = ks.len() as f64;
    let mk = ks.iter().map(|&k| k as f64).sum::<f64>() / n;
    let mt = times.iter().sum::<f64>() / n;
    let sxy: f64 = ks.iter().zip(&times).map(|(&k, t)| (k as f64 - mk) * (t - mt)).sum();
    let sxx: f64 = ks.iter().map(|&k| (k as f64 - mk).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = mt - slope * mk;
    let worst = ks
        .iter()
        .zip(&times)
        .map(|(&k, t)| {
            let fit = intercept + slope * k as f64;
            (t - fit).abs() / fit
        })
        .fold(0.0, f64::max);
    let shown: Vec<String> = ks
        .iter()
        .zip(&times)
        .map(|(k, t)| format!("K{k} {:.2}ms", t * 1e3))
        .collect();
    outcome(
        single < Duration::from_millis(50) && slope > 0.0 && worst <= 0.3,
        format!(
            "explain {single:.2?} (< 50 ms); linear fit worst deviation {:.1}% (<= 30%): {}",
            worst * 100.0,
            shown.join(", ")
        ),
    )
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..10) {
        0 => [0.0, -0.0, f32::NAN, f32::INFINITY, f32::MIN_POSITIVE / 2.0][rng.random_range(0..5)],
        1 => f32::from_bits(rng.random()),
        _ => rng.random_range(-10.0..10.0),
    }
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BoundingBox {
    let x1 = rng.random_range(0.0..w as f32 - 1.0);
    let y1 = rng.random_range(0.0..h as f32 - 1.0);
    BoundingBox::new(x1, y1, rng.random_range(x1 + 0.5..w as f32), rng.random_range(y1 + 0.5..h as f32))
}

fn random_capture(rng: &mut ChaCha8Rng) -> Capture {
    let (h, w) = (rng.random_range(2..40), rng.random_range(2..40));
    let bytes: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    let image = ImageRgb::from_rgb8(h, w, &bytes).unwrap();
    let classes = rng.random_range(1..5);
    let detections: Vec<Detection> = (0..rng.random_range(0..4))
        .map(|_| Detection {
            bbox: random_box(rng, h, w),
            objectness: rng.random(),
            class_scores: (0..classes).map(|_| rng.random()).collect(),
            class_id: rng.random_range(0..classes),
            source: rng.random_bool(0.7).then(|| SourceCell {
                level_index: rng.random_range(0..3),
                cell_row: rng.random_range(0..h),
                cell_col: rng.random_range(0..w),
            }),
        })
        .collect();
    let ids = ["cls0", "backbone.layer4.2", "head/cls-conv", "neck 0", "ü"];
    let n_layers = rng.random_range(0..4);
    let mut layers = Vec::new();
    let mut entries = Vec::new();
    for i in 0..n_layers {
        let (k, lh, lw) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9));
        let mut arr = || Tensor::new(vec![k, lh, lw], (0..k * lh * lw).map(|_| random_f32(rng)).collect()).unwrap();
        let features = arr();
        let gradients = arr();
        layers.push(LayerArrays { features, gradients });
        let id = ids[rng.random_range(0..ids.len())];
        entries.push(layer_entry(i, id, (k, lh, lw), rng.random_range(0.5..40.0)));
    }
    let ground_truth = rng.random_bool(0.5).then(|| {
        (0..rng.random_range(0..3))
            .map(|_| GroundTruth {
                bbox: random_box(rng, h, w),
                class_id: rng.random_range(0..classes),
            })
            .collect()
    });
    let target_detection = if detections.is_empty() { 0 } else { rng.random_range(0..detections.len()) };
    Capture {
        manifest: CaptureManifest {
            version: CAPTURE_VERSION,
            image_file: "image.png".into(),
            image_h: h,
            image_w: w,
            detections,
            target_detection,
            layers: entries,
            ground_truth,
            model_tag: format!("fuzz-{}", rng.random::<u16>()),
        },
        image,
        layers,
    }
}

fn bits(t: &Tensor) -> (Vec<usize>, Vec<u32>) {
    (t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect())
}

fn capture_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(612);
    let mut good = 0;
    let mut failures = Vec::new();
    for case in 0..100 {
        let c = random_capture(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let ok = match write_capture(&c, dir.path()).and_then(|_| read_capture(dir.path())) {
            Ok(back) => {
                back.manifest == c.manifest
                    && back.image.data().iter().map(|v| v.to_bits()).eq(c.image.data().iter().map(|v| v.to_bits()))
                    && back.layers.len() == c.layers.len()
                    && back.layers.iter().zip(&c.layers).all(|(x, y)| {
                        bits(&x.features) == bits(&y.features) && bits(&x.gradients) == bits(&y.gradients)
                    })
            }
            Err(e) => {
                eprintln!("case {case}: {e}");
                false
            }
        };
        if ok {
            good += 1;
        } else {
            failures.push(case);
        }
    }
    outcome(good == 100, format!("{good}/100 fuzzed captures bit-equal, failures {failures:?}"))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient oracle", gradient_oracle),
        ("one-pixel support", one_pixel_support),
        ("gaussian mask analytics", mask_analytics),
        ("sigma worked example", sigma_formula),
        ("two-object localization", localization),
        ("metrics oracles", metrics_oracles),
        ("information drop", info_drop),
        ("sanity randomization", sanity),
        ("performance", performance),
        ("capture round trip", capture_round_trip),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let o = run();
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
