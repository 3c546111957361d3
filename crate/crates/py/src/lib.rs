//! Python bindings. Arrays cross the boundary as flat row-major lists of
//! floats with a separate shape, so the module has no numpy dependency.

use std::path::PathBuf;

use gcame_core::capture::{self, WebpCodec};
use gcame_core::detector::fixtures;
use gcame_core::gcame::{self as core_gcame, CenterMode, GcameOptions};
use gcame_core::metrics::{self, DropRecord, MeanFill};
use gcame_core::{selftest, BoundingBox, ScoreTarget, Tensor, ToySource};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(gcame, GcameError, PyValueError);

fn err(e: gcame_core::Error) -> PyErr {
    GcameError::new_err(e.to_string())
}

fn options(mode: &str) -> PyResult<GcameOptions> {
    let mode: CenterMode = mode.parse().map_err(err)?;
    Ok(GcameOptions::with_mode(mode))
}

fn bbox(b: (f32, f32, f32, f32)) -> PyResult<BoundingBox> {
    let out = BoundingBox::new(b.0, b.1, b.2, b.3);
    if out.is_valid() {
        Ok(out)
    } else {
        Err(GcameError::new_err(format!("degenerate box {b:?}")))
    }
}

/// RGB image with channel values in `[0, 1]`, stored row-major as `[r, g, b]` triples.
#[pyclass(frozen, module = "gcame")]
pub struct Image {
    inner: gcame_core::ImageRgb,
}

#[pymethods]
impl Image {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: gcame_core::ImageRgb::new(height, width, data).map_err(err)?,
        })
    }

    /// One of the toy scenes: blank, one-square, two-squares.
    #[staticmethod]
    fn fixture(name: &str) -> PyResult<Self> {
        let config = gcame_core::DetectorConfig::default();
        Ok(Self {
            inner: fixtures::by_name(name, &config).map_err(err)?.image,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

#[pyclass(frozen, module = "gcame")]
pub struct Detection {
    inner: gcame_core::Detection,
}

#[pymethods]
impl Detection {
    /// `(x1, y1, x2, y2)` in pixels.
    #[getter(r#box)]
    fn bbox(&self) -> (f32, f32, f32, f32) {
        let b = self.inner.bbox;
        (b.x1, b.y1, b.x2, b.y2)
    }

    #[getter]
    fn class_id(&self) -> usize {
        self.inner.class_id
    }

    #[getter]
    fn objectness(&self) -> f32 {
        self.inner.objectness
    }

    #[getter]
    fn class_scores(&self) -> Vec<f32> {
        self.inner.class_scores.clone()
    }

    /// `p_obj · p_class`.
    #[getter]
    fn score(&self) -> f32 {
        self.inner.score()
    }

    /// `(level, row, col)` of the grid cell that produced the box.
    #[getter]
    fn source(&self) -> Option<(usize, usize, usize)> {
        self.inner
            .source
            .map(|s| (s.level_index, s.cell_row, s.cell_col))
    }

    fn __repr__(&self) -> String {
        let b = self.inner.bbox;
        format!(
            "Detection(class={}, score={:.4}, box=({}, {}, {}, {}))",
            self.inner.class_id,
            self.inner.score(),
            b.x1,
            b.y1,
            b.x2,
            b.y2
        )
    }
}

#[pyclass(frozen, module = "gcame")]
pub struct SaliencyMap {
    inner: core_gcame::SaliencyMap,
}

#[pymethods]
impl SaliencyMap {
    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Row-major values in `[0, 1]`.
    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.data().to_vec()
    }

    #[getter]
    fn layers(&self) -> Vec<String> {
        self.inner.layers.clone()
    }

    #[getter]
    fn no_signal(&self) -> bool {
        self.inner.no_signal
    }

    /// `(row, col)` of the maximum, first in row-major order on ties.
    fn peak(&self) -> (usize, usize) {
        metrics::argmax_pixel(&self.inner.values)
    }

    #[pyo3(signature = (r#box, multi_max = false))]
    fn pointing_game(&self, r#box: (f32, f32, f32, f32), multi_max: bool) -> PyResult<bool> {
        Ok(metrics::pointing_game(&self.inner, &bbox(r#box)?, multi_max))
    }

    fn ebpg(&self, r#box: (f32, f32, f32, f32)) -> PyResult<f64> {
        Ok(metrics::ebpg(&self.inner, &bbox(r#box)?))
    }

    /// Writes the map as a float32 NPY file.
    fn save_npy(&self, path: PathBuf) -> PyResult<()> {
        capture::write_atomic(&path, &capture::npy::to_bytes(&self.inner.values)).map_err(err)
    }

    /// Writes a jet overlay of the map on `image` as PNG.
    fn save_heatmap(&self, image: &Image, path: PathBuf) -> PyResult<()> {
        let png = capture::render_heatmap(&image.inner, &self.inner, &capture::HeatmapStyle::default())
            .map_err(err)?;
        capture::write_atomic(&path, &png).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SaliencyMap({}x{}, layers={:?}, no_signal={})",
            self.inner.height(),
            self.inner.width(),
            self.inner.layers,
            self.inner.no_signal
        )
    }
}

/// The closed-form toy detector: one class per square color.
#[pyclass(frozen, module = "gcame")]
pub struct Detector {
    inner: gcame_core::Detector,
}

#[pymethods]
impl Detector {
    #[new]
    #[pyo3(signature = (height = 64, width = 64, stride = 8, channels = 64, classes = 3))]
    fn new(height: usize, width: usize, stride: usize, channels: usize, classes: usize) -> PyResult<Self> {
        let config = gcame_core::DetectorConfig::single_level(height, width, stride, channels, classes);
        Ok(Self {
            inner: gcame_core::build_blob_detector(&config).map_err(err)?,
        })
    }

    fn layer_ids(&self) -> Vec<String> {
        self.inner.layer_ids().into_iter().map(String::from).collect()
    }

    fn detect(&self, image: &Image) -> PyResult<Vec<Detection>> {
        let (dets, _) = self.inner.forward(&image.inner).map_err(err)?;
        Ok(dets.into_iter().map(|inner| Detection { inner }).collect())
    }

    /// Explains detection `index` of `image`. `layers` defaults to the
    /// class-head input.
    #[pyo3(signature = (image, index = 0, layers = None, mode = "one_stage"))]
    fn explain(
        &self,
        image: &Image,
        index: usize,
        layers: Option<Vec<String>>,
        mode: &str,
    ) -> PyResult<SaliencyMap> {
        let (dets, cache) = self.inner.forward(&image.inner).map_err(err)?;
        let d = dets
            .get(index)
            .ok_or_else(|| GcameError::new_err(format!("no detection {index} ({} found)", dets.len())))?;
        let layers = layers.unwrap_or_else(|| vec![self.inner.class_head_input(0)]);
        let src = ToySource::new(&self.inner, &cache, ScoreTarget::of(d).map_err(err)?);
        let inner = core_gcame::explain(&src, &layers, &options(mode)?).map_err(err)?;
        Ok(SaliencyMap { inner })
    }

    /// Records detection `index` of `image` as a capture directory.
    #[pyo3(signature = (image, path, index = 0, layers = None))]
    fn capture(&self, image: &Image, path: PathBuf, index: usize, layers: Option<Vec<String>>) -> PyResult<Capture> {
        let layers = layers.unwrap_or_else(|| vec![self.inner.class_head_input(0)]);
        let c = capture::capture_toy(&self.inner, &image.inner, &layers, None, |_| Some(index)).map_err(err)?;
        capture::write_capture(&c, &path).map_err(err)?;
        Ok(Capture { inner: c })
    }
}

/// A capture directory loaded into memory.
#[pyclass(frozen, module = "gcame")]
pub struct Capture {
    inner: capture::Capture,
}

#[pymethods]
impl Capture {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: capture::read_capture(&path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        capture::write_capture(&self.inner, &path).map_err(err)
    }

    fn layer_ids(&self) -> Vec<String> {
        self.inner.layer_ids()
    }

    #[getter]
    fn image(&self) -> Image {
        Image {
            inner: self.inner.image.clone(),
        }
    }

    #[getter]
    fn target(&self) -> Option<Detection> {
        self.inner.target().cloned().map(|inner| Detection { inner })
    }

    #[getter]
    fn model_tag(&self) -> String {
        self.inner.manifest.model_tag.clone()
    }

    #[pyo3(signature = (layers = None, mode = "one_stage"))]
    fn explain(&self, layers: Option<Vec<String>>, mode: &str) -> PyResult<SaliencyMap> {
        let layers = layers.unwrap_or_else(|| self.inner.layer_ids());
        let inner = core_gcame::explain(&self.inner, &layers, &options(mode)?).map_err(err)?;
        Ok(SaliencyMap { inner })
    }
}

/// Gaussian spread of one gradient map of size `h×w` for an `image_h×image_w` input.
#[pyfunction]
fn compute_sigma(gradient: Vec<f32>, h: usize, w: usize, image_h: usize, image_w: usize) -> PyResult<f64> {
    let g = Tensor::new(vec![h, w], gradient).map_err(err)?;
    core_gcame::compute_sigma(&g, image_h, image_w).map_err(err)
}

/// Peak-normalized Gaussian over an `h×w` grid, flattened row-major.
#[pyfunction]
fn gaussian_mask(h: usize, w: usize, center: (usize, usize), sigma: f64) -> PyResult<Vec<f32>> {
    Ok(core_gcame::gaussian_mask(h, w, center, sigma)
        .map_err(err)?
        .values
        .into_data())
}

#[pyfunction]
fn iou(a: (f32, f32, f32, f32), b: (f32, f32, f32, f32)) -> PyResult<f64> {
    Ok(metrics::iou(&bbox(a)?, &bbox(b)?))
}

/// Mean relative drop in percent over `(original, perturbed)` confidence pairs.
#[pyfunction]
fn average_drop(pairs: Vec<(f64, f64)>) -> PyResult<f64> {
    let records: Vec<DropRecord> = pairs
        .into_iter()
        .map(|(original, perturbed)| DropRecord { original, perturbed })
        .collect();
    metrics::average_drop(&records).map_err(err)
}

/// `image` with its most salient pixels blended toward the image mean.
#[pyfunction]
#[pyo3(signature = (image, saliency, keep_fraction = 0.2))]
fn perturb_image(image: &Image, saliency: &SaliencyMap, keep_fraction: f64) -> PyResult<Image> {
    let inner = metrics::perturb_image(&image.inner, &saliency.inner, keep_fraction, MeanFill::Global)
        .map_err(err)?;
    Ok(Image { inner })
}

/// `(percent, ratio)` of the compressed-size drop from `original` to `bokeh`.
#[pyfunction]
#[pyo3(signature = (original, bokeh, quality = 75.0))]
fn information_drop(original: &Image, bokeh: &Image, quality: f32) -> PyResult<(f64, f64)> {
    let codec = WebpCodec::new(quality).map_err(err)?;
    let d = metrics::information_drop(&original.inner, &bokeh.inner, &codec).map_err(err)?;
    Ok((d.percent, d.ratio))
}

/// Runs the built-in checks; returns one dict per check.
#[pyfunction]
fn run_selftest(py: Python<'_>) -> PyResult<Vec<Bound<'_, PyDict>>> {
    selftest::run(&selftest::SelftestOptions::default())
        .checks
        .into_iter()
        .map(|c| {
            let d = PyDict::new(py);
            d.set_item("name", c.name)?;
            d.set_item("passed", c.passed)?;
            d.set_item("detail", c.detail)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn gcame(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GcameError", m.py().get_type::<GcameError>())?;
    m.add_class::<Image>()?;
    m.add_class::<Detection>()?;
    m.add_class::<SaliencyMap>()?;
    m.add_class::<Detector>()?;
    m.add_class::<Capture>()?;
    m.add_function(wrap_pyfunction!(compute_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_mask, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_drop, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_image, m)?)?;
    m.add_function(wrap_pyfunction!(information_drop, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    Ok(())
}
