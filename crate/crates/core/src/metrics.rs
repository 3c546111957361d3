//! Localization and faithfulness metrics for saliency maps.

use serde::{Deserialize, Serialize};

use crate::capture::LossyCodec;
use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::gcame::SaliencyMap;
use crate::numerics::{ImageRgb, Tensor};

/// Share of image area at or below which an object counts as tiny.
pub const TINY_AREA_RATIO: f64 = 0.005;

/// Fraction of saliency pixels kept when building the bokeh image.
pub const DEFAULT_KEEP_FRACTION: f64 = 0.2;

/// Axis-aligned box in pixel coordinates, top-left / bottom-right.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) as f64 * (self.y2 - self.y1).max(0.0) as f64
    }

    /// Whether pixel `(row, col)` belongs to the box. A pixel is inside when
    /// its center `(col + 0.5, row + 0.5)` is.
    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f32 + 0.5, row as f32 + 0.5);
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Row-major index of the first maximum.
pub fn argmax_pixel(map: &Tensor) -> (usize, usize) {
    let w = map.shape()[map.rank() - 1];
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Pointing game hit. With `multi_max` every pixel attaining the maximum
/// must fall inside the box; otherwise only the first one in row-major order.
pub fn pointing_game(saliency: &SaliencyMap, gt: &BoundingBox, multi_max: bool) -> bool {
    let v = &saliency.values;
    if !multi_max {
        let (r, c) = argmax_pixel(v);
        return gt.contains_pixel(r, c);
    }
    let w = saliency.width();
    let peak = v.max();
    v.data()
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == peak)
        .all(|(i, _)| gt.contains_pixel(i / w, i % w))
}

/// Share of total saliency energy inside `bbox`. An all-zero map gives 0.
pub fn ebpg(saliency: &SaliencyMap, bbox: &BoundingBox) -> f64 {
    let w = saliency.width();
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (i, &v) in saliency.values.data().iter().enumerate() {
        let v = v as f64;
        total += v;
        if bbox.contains_pixel(i / w, i % w) {
            inside += v;
        }
    }
    if total == 0.0 {
        log::warn!("saliency map has no energy; EBPG set to 0");
        return 0.0;
    }
    inside / total
}

pub fn is_tiny(bbox: &BoundingBox, image_h: usize, image_w: usize) -> bool {
    bbox.area() / (image_h * image_w) as f64 <= TINY_AREA_RATIO
}

/// Fill value for masked pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanFill {
    /// One scalar over all pixels and channels.
    #[default]
    Global,
    PerChannel,
}

/// Saliency with everything outside the top `keep_fraction` of pixels set to
/// zero. Exactly `⌈keep_fraction·H·W⌉` pixels are kept; ties go to the
/// earlier pixel in row-major order.
pub fn threshold_saliency(saliency: &Tensor, keep_fraction: f64) -> Result<Tensor> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "keep fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    let n = saliency.len();
    let keep = ((keep_fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let data = saliency.data();
    order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    let mut out = vec![0.0f32; n];
    for &i in &order[..keep] {
        out[i] = data[i];
    }
    Tensor::new(saliency.shape().to_vec(), out)
}

/// Bokeh image `I ⊙ (1 − M) + μ·M`, with `M` the thresholded saliency.
pub fn perturb_image(
    image: &ImageRgb,
    saliency: &SaliencyMap,
    keep_fraction: f64,
    fill: MeanFill,
) -> Result<ImageRgb> {
    if saliency.height() != image.height() || saliency.width() != image.width() {
        return Err(Error::Shape(format!(
            "saliency {}x{} vs image {}x{}",
            saliency.height(),
            saliency.width(),
            image.height(),
            image.width()
        )));
    }
    let mask = threshold_saliency(&saliency.values, keep_fraction)?;
    let mu = match fill {
        MeanFill::Global => [image.mean(); 3],
        MeanFill::PerChannel => image.channel_means(),
    };
    let mut out = image.clone();
    for (p, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let (r, c) = (p / image.width(), p % image.width());
        let px = image.pixel(r, c);
        let m = m as f64;
        let mixed = std::array::from_fn(|ch| {
            (px[ch] as f64 * (1.0 - m) + mu[ch] * m).clamp(0.0, 1.0) as f32
        });
        out.set_pixel(r, c, mixed);
    }
    Ok(out)
}

/// Confidence of the original detection on the perturbed image: the best
/// IoU over `perturbed` times that box's `p_obj · p_c`, with `c` the original
/// class. With `same_class` only boxes predicting `c` are considered.
pub fn matched_confidence(original: &Detection, perturbed: &[Detection], same_class: bool) -> f64 {
    let mut best: Option<(f64, &Detection)> = None;
    for d in perturbed {
        if same_class && d.class_id != original.class_id {
            continue;
        }
        let v = iou(&original.bbox, &d.bbox);
        if best.map_or(true, |(b, _)| v > b) {
            best = Some((v, d));
        }
    }
    match best {
        Some((v, d)) => v * d.class_confidence(original.class_id) as f64,
        None => 0.0,
    }
}

/// Confidence before and after masking for one explained detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub original: f64,
    pub perturbed: f64,
}

/// Mean relative confidence drop in percent, one record per detection.
pub fn average_drop(records: &[DropRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records".into()));
    }
    let mut terms = Vec::with_capacity(records.len());
    for r in records {
        if !(r.original > 0.0) {
            return Err(Error::InvalidInput(format!(
                "original confidence must be positive, got {}",
                r.original
            )));
        }
        terms.push((r.original - r.perturbed).max(0.0) / r.original);
    }
    Ok(stable_sum(terms) / records.len() as f64 * 100.0)
}

/// Sum that does not depend on input order.
fn stable_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn stable_mean(v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    Some(stable_sum(v) / n)
}

/// Compressed size of the bokeh image relative to the original.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InformationDrop {
    pub percent: f64,
    pub ratio: f64,
    pub original_bytes: usize,
    pub bokeh_bytes: usize,
}

pub fn information_drop(
    original: &ImageRgb,
    bokeh: &ImageRgb,
    codec: &dyn LossyCodec,
) -> Result<InformationDrop> {
    if original.height() != bokeh.height() || original.width() != bokeh.width() {
        return Err(Error::Shape("original and bokeh images differ in size".into()));
    }
    let a = codec.encode(original)?.len();
    let b = codec.encode(bokeh)?.len();
    let ratio = b as f64 / a as f64;
    Ok(InformationDrop {
        percent: 100.0 * (1.0 - ratio),
        ratio,
        original_bytes: a,
        bokeh_bytes: b,
    })
}

/// Everything needed to score one explained detection.
#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub saliency: SaliencyMap,
    pub ground_truth: BoundingBox,
    pub original: Detection,
    /// Detections on the perturbed image. Captures only have them when an
    /// external tool reran the model on the bokeh image.
    pub perturbed_detections: Option<Vec<Detection>>,
    /// Information drop of this record's image, when it was measured.
    pub information_drop: Option<f64>,
}

impl EvalRecord {
    pub fn drop_record(&self, same_class: bool) -> Option<DropRecord> {
        let perturbed = self.perturbed_detections.as_ref()?;
        Some(DropRecord {
            original: self.original.score() as f64,
            perturbed: matched_confidence(&self.original, perturbed, same_class),
        })
    }
}

/// Aggregate scores. A field is `null` when no record contributes to it, so
/// the `*Tiny` fields are `null` when no record is tiny.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub pg: f64,
    pub ebpg: f64,
    pub average_drop_percent: Option<f64>,
    pub information_drop_percent: Option<f64>,
    pub pg_tiny: Option<f64>,
    pub ebpg_tiny: Option<f64>,
    pub average_drop_percent_tiny: Option<f64>,
    pub information_drop_percent_tiny: Option<f64>,
    pub n: usize,
    pub n_tiny: usize,
}

/// `multi_max` selects the strict pointing game; `same_class` restricts box
/// matching to the explained class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub multi_max: bool,
    pub same_class: bool,
}

struct Split {
    pg: Vec<f64>,
    ebpg: Vec<f64>,
    drops: Vec<DropRecord>,
    info: Vec<f64>,
}

impl Split {
    fn new() -> Self {
        Self {
            pg: Vec::new(),
            ebpg: Vec::new(),
            drops: Vec::new(),
            info: Vec::new(),
        }
    }

    fn push(&mut self, r: &EvalRecord, options: &EvalOptions) {
        let hit = pointing_game(&r.saliency, &r.ground_truth, options.multi_max);
        self.pg.push(if hit { 1.0 } else { 0.0 });
        self.ebpg.push(ebpg(&r.saliency, &r.ground_truth));
        self.drops.extend(r.drop_record(options.same_class));
        if let Some(d) = r.information_drop {
            self.info.push(d);
        }
    }
}

fn drop_mean(drops: &[DropRecord]) -> Result<Option<f64>> {
    if drops.is_empty() {
        Ok(None)
    } else {
        average_drop(drops).map(Some)
    }
}

/// Scores every record; tiny-ness is judged on the ground-truth box.
pub fn evaluate(records: &[EvalRecord], options: &EvalOptions) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut all = Split::new();
    let mut tiny = Split::new();
    for r in records {
        all.push(r, options);
        if is_tiny(&r.ground_truth, r.saliency.height(), r.saliency.width()) {
            tiny.push(r, options);
        }
    }
    let n_tiny = tiny.pg.len();
    Ok(MetricsReport {
        pg: stable_mean(all.pg).unwrap_or(0.0),
        ebpg: stable_mean(all.ebpg).unwrap_or(0.0),
        average_drop_percent: drop_mean(&all.drops)?,
        information_drop_percent: stable_mean(all.info),
        pg_tiny: stable_mean(tiny.pg),
        ebpg_tiny: stable_mean(tiny.ebpg),
        average_drop_percent_tiny: drop_mean(&tiny.drops)?,
        information_drop_percent_tiny: stable_mean(tiny.info),
        n: records.len(),
        n_tiny,
    })
}
