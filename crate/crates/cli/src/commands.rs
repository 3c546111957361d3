use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcame_core::capture::{
    self, compose_grid, npy, overlay, read_capture, render_heatmap, write_atomic, Capture,
    HeatmapStyle, WebpCodec, MANIFEST_FILE,
};
use gcame_core::detector::fixtures::{self, match_detection, Scene};
use gcame_core::gcame::{explain, CenterMode, GcameOptions, SaliencyMap};
use gcame_core::metrics::{
    ebpg, evaluate, information_drop, iou, perturb_image, pointing_game, EvalOptions, EvalRecord,
    MeanFill, MetricsReport,
};
use gcame_core::sanity::{sanity_report, RandomizationMode, RandomizationPlan, SanityReport};
use gcame_core::selftest::{self, SelftestOptions, SelftestReport};
use gcame_core::{
    build_blob_detector, BoundingBox, Detection, Detector, DetectorConfig, ImageRgb, ScoreTarget,
    ToySource,
};
use serde::Serialize;

use crate::args::{Command, RunArgs};

/// File an external tool may drop next to a capture: detections of the same
/// model on the bokeh image, used for Average Drop.
pub const PERTURBED_FILE: &str = "perturbed_detections.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Output(String),
    #[error("no gradient signal in any requested layer")]
    NoSignal,
    #[error("{failed} selftest check(s) failed")]
    ChecksFailed { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::ChecksFailed { .. } | Self::Output(_) => 1,
            Self::Input(_) => 2,
            Self::NoSignal => 3,
        }
    }
}

impl From<gcame_core::Error> for CliError {
    fn from(e: gcame_core::Error) -> Self {
        Self::Input(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, args: &RunArgs) -> Result<()> {
    match command {
        Command::Explain => cmd_explain(args),
        Command::Evaluate => cmd_evaluate(args),
        Command::Sanity => cmd_sanity(args),
        Command::Selftest => cmd_selftest(args),
    }
}

fn options(args: &RunArgs) -> GcameOptions {
    GcameOptions::with_mode(args.mode)
}

fn codec(args: &RunArgs) -> Result<WebpCodec> {
    Ok(WebpCodec::new(args.quality)?)
}

fn check_keep_fraction(args: &RunArgs) -> Result<()> {
    if args.keep_fraction > 0.0 && args.keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "--keep-fraction must lie in (0, 1], got {}",
            args.keep_fraction
        )))
    }
}

fn toy_detector() -> Result<Detector> {
    Ok(build_blob_detector(&DetectorConfig::default())?)
}

fn head_layers(det: &Detector) -> Vec<String> {
    (0..det.config().levels.len()).map(|l| det.class_head_input(l)).collect()
}

fn pick_layers(args: &RunArgs, available: Vec<String>) -> Vec<String> {
    if args.layers.is_empty() {
        available
    } else {
        args.layers.clone()
    }
}

fn single_capture(args: &RunArgs) -> Result<Option<&Path>> {
    match args.capture.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(one)),
        _ => Err(CliError::Input("explain takes a single --capture".into())),
    }
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Output(format!("cannot create {}: {e}", dir.display())))?;
    write_atomic(&dir.join(name), bytes)
        .map_err(|e| CliError::Output(format!("cannot write {name}: {e}")))
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    v.push(b'\n');
    Ok(v)
}

fn emit<T: Serialize>(args: &RunArgs, name: &str, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    let bytes = to_json(value)?;
    write_out(&args.out, name, &bytes)?;
    if args.json {
        print!("{}", String::from_utf8_lossy(&bytes));
    } else {
        print!("{}", human());
    }
    Ok(())
}

fn best_box<'a>(det: &Detection, boxes: impl IntoIterator<Item = &'a BoundingBox>) -> Option<BoundingBox> {
    boxes
        .into_iter()
        .map(|b| (iou(&det.bbox, b), *b))
        .filter(|(v, _)| *v > 0.0)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, b)| b)
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ExplainSummary {
    command: &'static str,
    source: String,
    mode: CenterMode,
    layers_requested: Vec<String>,
    layers_used: Vec<String>,
    target: Option<Detection>,
    no_signal: bool,
    peak: Option<(usize, usize)>,
    ground_truth: Option<BoundingBox>,
    pointing_game: Option<bool>,
    ebpg: Option<f64>,
    timing_ms: f64,
}

struct Explained {
    source: String,
    image: ImageRgb,
    layers: Vec<String>,
    target: Option<Detection>,
    ground_truth: Option<BoundingBox>,
    saliency: SaliencyMap,
    seconds: f64,
}

fn explain_capture(dir: &Path, args: &RunArgs) -> Result<Explained> {
    let c = read_capture(dir)?;
    let layers = pick_layers(args, c.layer_ids());
    let start = Instant::now();
    let saliency = explain(&c, &layers, &options(args))?;
    let seconds = start.elapsed().as_secs_f64();
    let target = c.target().cloned();
    let ground_truth = target.as_ref().and_then(|t| {
        c.manifest
            .ground_truth
            .as_ref()
            .and_then(|gt| best_box(t, gt.iter().map(|g| &g.bbox)))
    });
    Ok(Explained {
        source: dir.display().to_string(),
        image: c.image,
        layers,
        target,
        ground_truth,
        saliency,
        seconds,
    })
}

fn explain_toy(name: &str, args: &RunArgs) -> Result<Explained> {
    let det = toy_detector()?;
    let scene = fixtures::by_name(name, det.config())?;
    let layers = pick_layers(args, head_layers(&det));
    let start = Instant::now();
    let (dets, cache) = det.forward(&scene.image)?;
    let (saliency, target) = match dets.first() {
        Some(d) => {
            let src = ToySource::new(&det, &cache, ScoreTarget::of(d)?);
            (explain(&src, &layers, &options(args))?, Some(d.clone()))
        }
        None => {
            for l in &layers {
                cache.output(l)?;
            }
            log::warn!("fixture `{name}` has no detection to explain");
            let (h, w) = (scene.image.height(), scene.image.width());
            (SaliencyMap::zeros(h, w), None)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let ground_truth = target
        .as_ref()
        .and_then(|t| best_box(t, scene.objects.iter().map(|o| &o.bbox)));
    Ok(Explained {
        source: format!("toy:{name}"),
        image: scene.image,
        layers,
        target,
        ground_truth,
        saliency,
        seconds,
    })
}

fn cmd_explain(args: &RunArgs) -> Result<()> {
    let ex = match (single_capture(args)?, &args.toy) {
        (Some(dir), _) => explain_capture(dir, args)?,
        (None, Some(name)) => explain_toy(name, args)?,
        (None, None) => return Err(CliError::Input("explain needs --capture DIR or --toy FIXTURE".into())),
    };
    let s = &ex.saliency;
    let peak = (!s.no_signal).then(|| gcame_core::metrics::argmax_pixel(&s.values));
    let summary = ExplainSummary {
        command: "explain",
        source: ex.source.clone(),
        mode: args.mode,
        layers_requested: ex.layers.clone(),
        layers_used: s.layers.clone(),
        target: ex.target.clone(),
        no_signal: s.no_signal,
        peak,
        ground_truth: ex.ground_truth,
        pointing_game: ex.ground_truth.filter(|_| !s.no_signal).map(|b| pointing_game(s, &b, false)),
        ebpg: ex.ground_truth.filter(|_| !s.no_signal).map(|b| ebpg(s, &b)),
        timing_ms: ex.seconds * 1e3,
    };
    write_out(&args.out, "saliency.npy", &npy::to_bytes(&s.values))?;
    write_out(
        &args.out,
        "heatmap.png",
        &render_heatmap(&ex.image, s, &HeatmapStyle::default())?,
    )?;
    emit(args, "summary.json", &summary, || {
        let mut t = String::new();
        t += &format!("source        {}\n", summary.source);
        t += &format!("layers used   {}\n", summary.layers_used.join(", "));
        match &summary.target {
            Some(d) => t += &format!("target        class {} score {:.4}\n", d.class_id, d.score()),
            None => t += "target        none\n",
        }
        if let Some((r, c)) = summary.peak {
            t += &format!("peak          ({r}, {c})\n");
        }
        if let (Some(hit), Some(e)) = (summary.pointing_game, summary.ebpg) {
            t += &format!("pointing game {}\nebpg          {e:.4}\n", if hit { "hit" } else { "miss" });
        }
        t += &format!("time          {:.2} ms\n", summary.timing_ms);
        t += &format!("wrote         {}\n", args.out.display());
        t
    })?;
    if s.no_signal {
        log::warn!("explanation carries no gradient signal");
        if args.strict {
            return Err(CliError::NoSignal);
        }
    }
    Ok(())
}

/// Capture directories named on the command line. A directory without a
/// manifest is searched one level down.
fn capture_dirs(args: &RunArgs) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in &args.capture {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir.clone());
            continue;
        }
        let entries = fs::read_dir(dir)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", dir.display())))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(MANIFEST_FILE).is_file())
            .collect();
        if found.is_empty() {
            return Err(CliError::Input(format!("no {MANIFEST_FILE} in or under {}", dir.display())));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn capture_record(dir: &Path, c: &Capture, args: &RunArgs) -> Result<Option<EvalRecord>> {
    let Some(target) = c.target().cloned() else {
        log::warn!("{}: no target detection, skipped", dir.display());
        return Ok(None);
    };
    let Some(gt) = c
        .manifest
        .ground_truth
        .as_ref()
        .and_then(|gt| best_box(&target, gt.iter().map(|g| &g.bbox)))
    else {
        log::warn!("{}: no ground truth overlaps the target, skipped", dir.display());
        return Ok(None);
    };
    let layers = pick_layers(args, c.layer_ids());
    let saliency = explain(c, &layers, &options(args))?;
    let bokeh = perturb_image(&c.image, &saliency, args.keep_fraction, MeanFill::Global)?;
    let info = information_drop(&c.image, &bokeh, &codec(args)?)?;
    let perturbed_path = dir.join(PERTURBED_FILE);
    let perturbed_detections = if perturbed_path.is_file() {
        let bytes = fs::read(&perturbed_path)
            .map_err(|e| CliError::Input(format!("{}: {e}", perturbed_path.display())))?;
        Some(
            serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Input(format!("{}: {e}", perturbed_path.display())))?,
        )
    } else {
        None
    };
    Ok(Some(EvalRecord {
        saliency,
        ground_truth: gt,
        original: target,
        perturbed_detections,
        information_drop: Some(info.percent),
    }))
}

fn toy_scenes(name: &str, args: &RunArgs, det: &Detector) -> Result<Vec<Scene>> {
    if name == "pairs" {
        if args.count == 0 {
            return Err(CliError::Input("--count must be positive".into()));
        }
        Ok(fixtures::pair_suite(det.config(), args.count, args.seed)?)
    } else {
        Ok(vec![fixtures::by_name(name, det.config())?])
    }
}

fn toy_records(name: &str, args: &RunArgs) -> Result<(Vec<EvalRecord>, usize)> {
    let det = toy_detector()?;
    let layers = pick_layers(args, head_layers(&det));
    let codec = codec(args)?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for scene in toy_scenes(name, args, &det)? {
        let (dets, cache) = det.forward(&scene.image)?;
        for obj in &scene.objects {
            let Some(d) = match_detection(&dets, &obj.bbox) else {
                skipped += 1;
                continue;
            };
            let src = ToySource::new(&det, &cache, ScoreTarget::of(d)?);
            let saliency = explain(&src, &layers, &options(args))?;
            let bokeh = perturb_image(&scene.image, &saliency, args.keep_fraction, MeanFill::Global)?;
            let (perturbed, _) = det.forward(&bokeh)?;
            let info = information_drop(&scene.image, &bokeh, &codec)?;
            records.push(EvalRecord {
                saliency,
                ground_truth: obj.bbox,
                original: d.clone(),
                perturbed_detections: Some(perturbed),
                information_drop: Some(info.percent),
            });
        }
    }
    Ok((records, skipped))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct EvaluateOutput {
    command: &'static str,
    source: String,
    keep_fraction: f64,
    codec: &'static str,
    quality: f32,
    skipped: usize,
    #[serde(flatten)]
    report: MetricsReport,
}

fn cmd_evaluate(args: &RunArgs) -> Result<()> {
    check_keep_fraction(args)?;
    let (records, skipped, source) = if !args.capture.is_empty() {
        let mut records = Vec::new();
        let mut skipped = 0;
        for dir in capture_dirs(args)? {
            let c = read_capture(&dir)?;
            match capture_record(&dir, &c, args)? {
                Some(r) => records.push(r),
                None => skipped += 1,
            }
        }
        let names: Vec<String> = args.capture.iter().map(|p| p.display().to_string()).collect();
        (records, skipped, names.join(","))
    } else if let Some(name) = &args.toy {
        let (r, s) = toy_records(name, args)?;
        (r, s, format!("toy:{name}"))
    } else {
        return Err(CliError::Input("evaluate needs --capture DIR or --toy FIXTURE".into()));
    };
    if records.is_empty() {
        return Err(CliError::Input("no explainable records in the dataset".into()));
    }
    let report = evaluate(&records, &EvalOptions::default())?;
    let out = EvaluateOutput {
        command: "evaluate",
        source,
        keep_fraction: args.keep_fraction,
        codec: "webp",
        quality: args.quality,
        skipped,
        report,
    };
    emit(args, "metrics.json", &out, || {
        let r = &out.report;
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut t = String::new();
        t += &format!("{:<22}{:>12}{:>12}\n", "", "overall", "tiny");
        t += &format!("{:<22}{:>12}{:>12}\n", "records", r.n, r.n_tiny);
        t += &format!("{:<22}{:>12.4}{:>12}\n", "pointing game", r.pg, opt(r.pg_tiny));
        t += &format!("{:<22}{:>12.4}{:>12}\n", "energy pointing game", r.ebpg, opt(r.ebpg_tiny));
        t += &format!(
            "{:<22}{:>12}{:>12}\n",
            "average drop %",
            opt(r.average_drop_percent),
            opt(r.average_drop_percent_tiny)
        );
        t += &format!(
            "{:<22}{:>12}{:>12}\n",
            "information drop %",
            opt(r.information_drop_percent),
            opt(r.information_drop_percent_tiny)
        );
        if out.skipped > 0 {
            t += &format!("skipped {} objects without a matching detection\n", out.skipped);
        }
        t
    })
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct SanityRow {
    label: String,
    mode: RandomizationMode,
    layer: String,
    seed: u64,
    pearson: Option<f64>,
    saliency_file: String,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct SanityOutput {
    command: &'static str,
    source: String,
    explained_layers: Vec<String>,
    entries: Vec<SanityRow>,
    mean_pearson_cascading: Option<f64>,
    mean_pearson_independent: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn cmd_sanity(args: &RunArgs) -> Result<()> {
    if !args.capture.is_empty() {
        return Err(CliError::Input(
            "sanity needs a model whose weights can be re-drawn; use --toy".into(),
        ));
    }
    let name = args.toy.as_deref().unwrap_or("one-square");
    let det = toy_detector()?;
    let scene = fixtures::by_name(name, det.config())?;
    let (dets, _) = det.forward(&scene.image)?;
    let d = dets
        .first()
        .ok_or_else(|| CliError::Input(format!("fixture `{name}` has no detection to explain")))?;
    let target = ScoreTarget::of(d)?;
    let layers = pick_layers(args, head_layers(&det));
    let randomized = if args.randomize.is_empty() {
        let l = target.cell.level_index;
        vec![
            format!("cls_pred{l}"),
            format!("cls{l}"),
            format!("neck{l}"),
            format!("pool{l}"),
            "color".to_string(),
        ]
    } else {
        args.randomize.clone()
    };
    let modes = [RandomizationMode::Cascading, RandomizationMode::Independent];
    let plans: Vec<RandomizationPlan> = modes
        .iter()
        .flat_map(|&m| randomized.iter().map(move |l| RandomizationPlan::new(m, l, args.seed)))
        .collect();
    let report: SanityReport = sanity_report(&det, &scene.image, target, &plans, &layers, &options(args))?;

    write_out(&args.out, "original.npy", &npy::to_bytes(&report.original.values))?;
    let style = HeatmapStyle::default();
    let mut rows = Vec::new();
    let mut entries = Vec::new();
    for (i, mode) in modes.iter().enumerate() {
        let mut row = vec![overlay(&scene.image, &report.original, &style)?];
        for e in &report.entries[i * randomized.len()..(i + 1) * randomized.len()] {
            let plan = e.plan.as_ref().expect("sanity entries carry their plan");
            let file = format!(
                "{}_{}.npy",
                if *mode == RandomizationMode::Cascading { "cascading" } else { "independent" },
                plan.target_layer_id
            );
            write_out(&args.out, &file, &npy::to_bytes(&e.saliency.values))?;
            row.push(overlay(&scene.image, &e.saliency, &style)?);
            entries.push(SanityRow {
                label: e.label.clone(),
                mode: plan.mode,
                layer: plan.target_layer_id.clone(),
                seed: plan.seed,
                pearson: e.pearson,
                saliency_file: file,
            });
        }
        rows.push(row);
    }
    let grid = compose_grid(&rows, 2)?;
    write_out(&args.out, "sanity_grid.png", &capture::encode_png(&grid)?)?;

    let mode_mean = |m: RandomizationMode| {
        mean(entries.iter().filter(|e| e.mode == m).map(|e| e.pearson.unwrap_or(0.0)))
    };
    let out = SanityOutput {
        command: "sanity",
        source: format!("toy:{name}"),
        explained_layers: layers,
        mean_pearson_cascading: mode_mean(RandomizationMode::Cascading),
        mean_pearson_independent: mode_mean(RandomizationMode::Independent),
        entries,
    };
    emit(args, "sanity.json", &out, || {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let mut t = format!("{:<34}{:>10}\n", "plan", "pearson");
        for e in &out.entries {
            t += &format!("{:<34}{:>10}\n", e.label, opt(e.pearson));
        }
        t += &format!(
            "mean cascading {}, independent {}\n",
            opt(out.mean_pearson_cascading),
            opt(out.mean_pearson_independent)
        );
        t
    })
}

fn cmd_selftest(args: &RunArgs) -> Result<()> {
    let report: SelftestReport = selftest::run(&SelftestOptions {
        corrupt_weights: args.corrupt_weights,
    });
    let bytes = to_json(&report)?;
    write_out(&args.out, "selftest.json", &bytes)?;
    if args.json {
        print!("{}", String::from_utf8_lossy(&bytes));
    } else {
        for c in &report.checks {
            println!("{} {:<26} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed { failed });
    }
    Ok(())
}
