//! On-disk interchange: a directory with `manifest.json`, a PNG image and one
//! NPY file per activation and gradient array.

mod codec;
pub mod npy;
mod render;
mod weights;

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{Detection, Detector};
use crate::error::{Error, Result};
use crate::gcame::{FeatureMapStack, GradientMap, LayerSource};
use crate::metrics::BoundingBox;
use crate::numerics::{ImageRgb, Tensor};

pub use codec::{decode_png, encode_lossy, encode_png, LossyCodec, WebpCodec, DEFAULT_QUALITY};
pub use render::{compose_grid, overlay, render_heatmap, Colormap, HeatmapStyle};
pub use weights::{read_detector, write_detector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CAPTURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LayerEntry {
    pub layer_id: String,
    pub feature_file: String,
    pub gradient_file: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub stride_or_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaptureManifest {
    pub version: u32,
    pub image_file: String,
    pub image_h: usize,
    pub image_w: usize,
    pub detections: Vec<Detection>,
    /// Index into `detections` of the box the gradients were taken for.
    #[serde(default)]
    pub target_detection: usize,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruth>>,
    #[serde(default)]
    pub model_tag: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerArrays {
    pub features: Tensor,
    pub gradients: Tensor,
}

/// A manifest with its image and arrays loaded. Images travel as 8-bit PNG,
/// so only images whose values are multiples of 1/255 survive bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Capture {
    pub manifest: CaptureManifest,
    pub image: ImageRgb,
    pub layers: Vec<LayerArrays>,
}

impl Capture {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.version != CAPTURE_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported version {}, expected {CAPTURE_VERSION}",
                m.version
            )));
        }
        if self.image.height() != m.image_h || self.image.width() != m.image_w {
            return Err(Error::Manifest(format!(
                "image is {}x{}, manifest says {}x{}",
                self.image.height(),
                self.image.width(),
                m.image_h,
                m.image_w
            )));
        }
        if m.layers.len() != self.layers.len() {
            return Err(Error::Manifest("layer list and arrays differ in length".into()));
        }
        for d in &m.detections {
            d.validate()?;
        }
        if !m.detections.is_empty() && m.target_detection >= m.detections.len() {
            return Err(Error::Manifest(format!(
                "target detection {} out of range",
                m.target_detection
            )));
        }
        check_relative(&m.image_file)?;
        for (entry, arrays) in m.layers.iter().zip(&self.layers) {
            check_relative(&entry.feature_file)?;
            check_relative(&entry.gradient_file)?;
            let expected = vec![entry.k, entry.h, entry.w];
            for (file, t) in [
                (&entry.feature_file, &arrays.features),
                (&entry.gradient_file, &arrays.gradients),
            ] {
                if t.shape() != expected.as_slice() {
                    return Err(Error::ShapeMismatch {
                        path: PathBuf::from(file),
                        expected,
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn target(&self) -> Option<&Detection> {
        self.manifest.detections.get(self.manifest.target_detection)
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.manifest.layers.iter().map(|l| l.layer_id.clone()).collect()
    }
}

impl LayerSource for Capture {
    fn image_size(&self) -> (usize, usize) {
        (self.manifest.image_h, self.manifest.image_w)
    }

    fn layer_maps(&self, layer: &str) -> Result<(FeatureMapStack, GradientMap)> {
        let idx = self
            .manifest
            .layers
            .iter()
            .position(|l| l.layer_id == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let arrays = &self.layers[idx];
        Ok((
            FeatureMapStack {
                values: arrays.features.clone(),
                layer_id: layer.to_string(),
            },
            GradientMap {
                values: arrays.gradients.clone(),
                layer_id: layer.to_string(),
                target: self.target().and_then(|d| d.source),
            },
        ))
    }
}

fn check_relative(file: &str) -> Result<()> {
    let p = Path::new(file);
    let ok = !file.is_empty()
        && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(Error::Manifest(format!("`{file}` must be a plain relative path")))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn read_capture(dir: &Path) -> Result<Capture> {
    let manifest: CaptureManifest = serde_json::from_slice(&read_file(&dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.version != CAPTURE_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported version {}, expected {CAPTURE_VERSION}",
            manifest.version
        )));
    }
    check_relative(&manifest.image_file)?;
    let image = decode_png(&read_file(&dir.join(&manifest.image_file))?)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        check_relative(&entry.feature_file)?;
        check_relative(&entry.gradient_file)?;
        let expected = vec![entry.k, entry.h, entry.w];
        let load = |file: &str| -> Result<Tensor> {
            let path = dir.join(file);
            let t = npy::read(&path)?;
            if t.shape() != expected.as_slice() {
                return Err(Error::ShapeMismatch {
                    path,
                    expected: expected.clone(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        layers.push(LayerArrays {
            features: load(&entry.feature_file)?,
            gradients: load(&entry.gradient_file)?,
        });
    }
    let capture = Capture {
        manifest,
        image,
        layers,
    };
    capture.validate()?;
    Ok(capture)
}

pub fn manifest_bytes(manifest: &CaptureManifest) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(manifest)?;
    out.push(b'\n');
    Ok(out)
}

/// Writes every file of `capture` under `dir`, creating it if needed.
/// Identical captures produce identical bytes.
pub fn write_capture(capture: &Capture, dir: &Path) -> Result<()> {
    capture.validate()?;
    fs::create_dir_all(dir)?;
    let m = &capture.manifest;
    write_atomic(&dir.join(&m.image_file), &encode_png(&capture.image)?)?;
    for (entry, arrays) in m.layers.iter().zip(&capture.layers) {
        write_atomic(&dir.join(&entry.feature_file), &npy::to_bytes(&arrays.features))?;
        write_atomic(&dir.join(&entry.gradient_file), &npy::to_bytes(&arrays.gradients))?;
    }
    write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes(m)?)
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;

    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// File names used when a capture is assembled in memory.
pub fn layer_entry(index: usize, layer_id: &str, shape: (usize, usize, usize), stride: f64) -> LayerEntry {
    let stem: String = layer_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    LayerEntry {
        layer_id: layer_id.to_string(),
        feature_file: format!("{index:02}_{stem}_features.npy"),
        gradient_file: format!("{index:02}_{stem}_gradients.npy"),
        k: shape.0,
        h: shape.1,
        w: shape.2,
        stride_or_scale: stride,
    }
}

/// Records a toy-detector explanation target as a capture. The image is
/// quantized to 8 bits first so it survives the PNG round trip, and the
/// detector runs on the quantized image. `pick` chooses the target among the
/// detections.
pub fn capture_toy(
    detector: &Detector,
    image: &ImageRgb,
    layers: &[String],
    ground_truth: Option<Vec<GroundTruth>>,
    pick: impl FnOnce(&[Detection]) -> Option<usize>,
) -> Result<Capture> {
    let image = ImageRgb::from_rgb8(image.height(), image.width(), &image.to_rgb8())?;
    let (detections, cache) = detector.forward(&image)?;
    let target = pick(&detections)
        .filter(|&i| i < detections.len())
        .ok_or_else(|| Error::InvalidInput("no detection to capture".into()))?;
    let mut entries = Vec::with_capacity(layers.len());
    let mut arrays = Vec::with_capacity(layers.len());
    for (i, id) in layers.iter().enumerate() {
        let features = cache.output(id)?.clone();
        let gradients = detector
            .backward_class_score(&cache, &detections[target], id)?
            .values;
        let (k, h, w) = features.dims3()?;
        entries.push(layer_entry(i, id, (k, h, w), image.width() as f64 / w as f64));
        arrays.push(LayerArrays {
            features,
            gradients,
        });
    }
    let capture = Capture {
        manifest: CaptureManifest {
            version: CAPTURE_VERSION,
            image_file: "image.png".into(),
            image_h: image.height(),
            image_w: image.width(),
            detections,
            target_detection: target,
            layers: entries,
            ground_truth,
            model_tag: "toy-blob".into(),
        },
        image,
        layers: arrays,
    };
    capture.validate()?;
    Ok(capture)
}
