//! Synthetic scenes for the blob detector: solid squares on a gray background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{blob::CLASS_COLORS, Detection, DetectorConfig};
use crate::error::{Error, Result};
use crate::metrics::{iou, BoundingBox};
use crate::numerics::ImageRgb;

pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

/// A square painted into a scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedObject {
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageRgb,
    pub objects: Vec<PlacedObject>,
}

impl Scene {
    pub fn blank(h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            image: ImageRgb::filled(h, w, BACKGROUND)?,
            objects: Vec::new(),
        })
    }

    /// Paints a `side×side` square of class `class_id` with top-left `(top, left)`.
    pub fn add_square(&mut self, top: usize, left: usize, side: usize, class_id: usize) -> Result<()> {
        let color = *CLASS_COLORS
            .get(class_id)
            .ok_or_else(|| Error::InvalidInput(format!("no color for class {class_id}")))?;
        if top + side > self.image.height() || left + side > self.image.width() {
            return Err(Error::InvalidInput("square does not fit the image".into()));
        }
        for r in top..top + side {
            for c in left..left + side {
                self.image.set_pixel(r, c, color);
            }
        }
        self.objects.push(PlacedObject {
            bbox: BoundingBox::new(
                left as f32,
                top as f32,
                (left + side) as f32,
                (top + side) as f32,
            ),
            class_id,
        });
        Ok(())
    }
}

/// Square side the first level is calibrated for.
fn side(config: &DetectorConfig) -> usize {
    2 * config.levels[0].stride
}

/// One class-0 square with its center in the middle of a cell near the image center.
pub fn one_square(config: &DetectorConfig) -> Result<Scene> {
    let s = config.levels[0].stride;
    let mut scene = Scene::blank(config.input_h, config.input_w)?;
    let top = (config.input_h / s / 2).saturating_sub(2) * s + s / 2;
    let left = (config.input_w / s / 2).saturating_sub(1) * s + s / 2;
    scene.add_square(top, left, side(config), 0)?;
    Ok(scene)
}

/// `one_square` with seeded texture: the square's brightness varies by up to
/// `object` and the background gray level by up to `background`. Gray carries
/// no color excess, so background texture is invisible to the detector.
pub fn textured_one_square(
    config: &DetectorConfig,
    object: f32,
    background: f32,
    seed: u64,
) -> Result<Scene> {
    let mut scene = one_square(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let square = scene.objects[0];
    let color = CLASS_COLORS[square.class_id];
    for r in 0..scene.image.height() {
        for c in 0..scene.image.width() {
            let px = if square.bbox.contains_pixel(r, c) {
                let f = 1.0 - rng.random_range(0.0..=object);
                color.map(|v| v * f)
            } else {
                let v = BACKGROUND[0] + rng.random_range(-background..=background);
                [v.clamp(0.0, 1.0); 3]
            };
            scene.image.set_pixel(r, c, px);
        }
    }
    Ok(scene)
}

/// Two same-class squares in opposite corners.
pub fn two_squares(config: &DetectorConfig) -> Result<Scene> {
    let s = config.levels[0].stride;
    let d = side(config);
    let mut scene = Scene::blank(config.input_h, config.input_w)?;
    scene.add_square(s / 2, s / 2, d, 0)?;
    let far = |n: usize| (n - d - s / 2) / s * s + s / 2;
    scene.add_square(far(config.input_h), far(config.input_w), d, 0)?;
    Ok(scene)
}

/// Minimum offset, along at least one axis, at which two squares stay out of
/// each other's 5×5-cell evidence window.
pub fn separation(config: &DetectorConfig) -> usize {
    4 * config.levels[0].stride
}

/// A scene with two squares at random pixel positions, far enough apart to be
/// detected independently, each of a random class.
pub fn random_pair(config: &DetectorConfig, rng: &mut impl Rng) -> Result<Scene> {
    let d = side(config);
    let (h, w) = (config.input_h, config.input_w);
    if h < d || w < d {
        return Err(Error::InvalidInput("image smaller than one square".into()));
    }
    let gap = separation(config);
    for _ in 0..1000 {
        let a = (rng.random_range(0..=h - d), rng.random_range(0..=w - d));
        let b = (rng.random_range(0..=h - d), rng.random_range(0..=w - d));
        if a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) < gap {
            continue;
        }
        let mut scene = Scene::blank(h, w)?;
        scene.add_square(a.0, a.1, d, rng.random_range(0..config.num_classes))?;
        scene.add_square(b.0, b.1, d, rng.random_range(0..config.num_classes))?;
        return Ok(scene);
    }
    Err(Error::InvalidInput(
        "image too small to separate two squares".into(),
    ))
}

/// `n` two-square scenes from a fixed seed.
pub fn pair_suite(config: &DetectorConfig, n: usize, seed: u64) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_pair(config, &mut rng)).collect()
}

/// Named scenes for the command line.
pub fn by_name(name: &str, config: &DetectorConfig) -> Result<Scene> {
    match name {
        "blank" => Scene::blank(config.input_h, config.input_w),
        "one-square" => one_square(config),
        "two-squares" => two_squares(config),
        _ => Err(Error::InvalidInput(format!(
            "unknown fixture `{name}` (expected blank, one-square or two-squares)"
        ))),
    }
}

pub const FIXTURE_NAMES: [&str; 3] = ["blank", "one-square", "two-squares"];

/// The detection overlapping `bbox` most, if any overlaps at all.
pub fn match_detection<'a>(detections: &'a [Detection], bbox: &BoundingBox) -> Option<&'a Detection> {
    let mut best: Option<(f64, &Detection)> = None;
    for d in detections {
        let v = iou(&d.bbox, bbox);
        if v > 0.0 && best.map_or(true, |(b, _)| v > b) {
            best = Some((v, d));
        }
    }
    best.map(|(_, d)| d)
}
